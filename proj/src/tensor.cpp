#include "strokeseg/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace strokeseg::nn {

namespace {

#ifdef __GLIBC__
// Graph buffers are large and short-lived; without this glibc serves them
// via mmap/munmap and the syscall traffic dominates training time.
const int kMallocTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return 0;
}();
#endif

using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw std::invalid_argument(std::string(op) + ": " + msg);
}

void check(bool ok, const char* op, const std::string& msg) {
  if (!ok) fail(op, msg);
}

// Column sums with a fixed accumulation order; Eigen's vectorized redux
// peels by buffer alignment, which breaks run-to-run bit determinism.
void colsum(const Scalar* m, std::int64_t rows, std::int64_t cols, Scalar* out) {
  std::fill(out, out + cols, 0.0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* row = m + r * cols;
    for (std::int64_t c = 0; c < cols; ++c) out[c] += row[c];
  }
}

Var make_node(const char* op, Tensor value, std::vector<NodePtr> parents,
              std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool req = false;
  for (const auto& p : parents) req = req || p->requires_grad;
  n->requires_grad = req;
  if (req) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

Scalar stable_sigmoid(Scalar z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

Tensor::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
    throw std::invalid_argument("Tensor: data size does not match shape " + shape_str(shape_));
}

Scalar Tensor::scalar() const {
  if (numel() != 1) throw std::logic_error("Tensor::scalar on shape " + shape_str(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (Scalar v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::add_(const Tensor& o) {
  if (!same_shape(o)) throw std::invalid_argument("Tensor::add_: shape mismatch");
  for (std::int64_t i = 0; i < numel(); ++i) data_[static_cast<std::size_t>(i)] += o[i];
}

Var constant(Tensor v) { return leaf(std::move(v), false); }

Var leaf(Tensor v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

void accumulate_grad(Node& n, const Tensor& g) {
  if (n.grad.empty())
    n.grad = g;
  else
    n.grad.add_(g);
}

void backward(const Var& root) {
  check(root.defined() && root.value().numel() == 1, "backward", "root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS; reversed order is a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->grad = Tensor(root.value().shape(), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Var add(const Var& a, const Var& b) {
  check(a.value().same_shape(b.value()), "add",
        "shape mismatch " + shape_str(a.value().shape()) + " vs " + shape_str(b.value().shape()));
  Tensor out = a.value();
  out.add_(b.value());
  return make_node("add", std::move(out), {a.node(), b.node()}, [](Node& n) {
    if (n.parents[0]->requires_grad) accumulate_grad(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) accumulate_grad(*n.parents[1], n.grad);
  });
}

Var scale(const Var& a, Scalar c) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return make_node("scale", std::move(out), {a.node()}, [c](Node& n) {
    Tensor g = n.grad;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= c;
    accumulate_grad(*n.parents[0], g);
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0 ? out[i] : 0;
  return make_node("relu", std::move(out), {a.node()}, [](Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor g(x.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = x[i] > 0 ? n.grad[i] : 0;
    accumulate_grad(*n.parents[0], g);
  });
}

Var gelu(const Var& a) {
  static const Scalar kInvSqrt2 = 1.0 / std::sqrt(2.0);
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i)
    out[i] = 0.5 * out[i] * (1.0 + std::erf(out[i] * kInvSqrt2));
  return make_node("gelu", std::move(out), {a.node()}, [](Node& n) {
    static const Scalar kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
    const Tensor& x = n.parents[0]->value;
    Tensor g(x.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const Scalar xi = x[i];
      const Scalar cdf = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
      const Scalar pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
      g[i] = n.grad[i] * (cdf + xi * pdf);
    }
    accumulate_grad(*n.parents[0], g);
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
  return make_node("sigmoid", std::move(out), {a.node()}, [](Node& n) {
    Tensor g(n.value.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i)
      g[i] = n.grad[i] * n.value[i] * (1.0 - n.value[i]);
    accumulate_grad(*n.parents[0], g);
  });
}

Var reshape(const Var& a, Shape shape) {
  check(shape_numel(shape) == a.value().numel(), "reshape",
        "cannot view " + shape_str(a.value().shape()) + " as " + shape_str(shape));
  Tensor out = a.value();
  Tensor reshaped(std::move(shape), std::vector<Scalar>(out.data(), out.data() + out.numel()));
  return make_node("reshape", std::move(reshaped), {a.node()}, [](Node& n) {
    const Shape& ps = n.parents[0]->value.shape();
    Tensor g(ps, std::vector<Scalar>(n.grad.data(), n.grad.data() + n.grad.numel()));
    accumulate_grad(*n.parents[0], g);
  });
}

namespace {

Tensor transpose_12_tensor(const Tensor& x) {
  const int A = x.dim(0), B = x.dim(1), C = x.dim(2), D = x.dim(3);
  Tensor out({A, C, B, D});
  for (int a = 0; a < A; ++a)
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        std::memcpy(out.data() + (((static_cast<std::int64_t>(a) * C + c) * B + b) * D),
                    x.data() + (((static_cast<std::int64_t>(a) * B + b) * C + c) * D),
                    sizeof(Scalar) * static_cast<std::size_t>(D));
  return out;
}

}  // namespace

Var transpose_12(const Var& a) {
  check(a.value().rank() == 4, "transpose_12", "expected rank-4, got " + shape_str(a.value().shape()));
  return make_node("transpose_12", transpose_12_tensor(a.value()), {a.node()}, [](Node& n) {
    accumulate_grad(*n.parents[0], transpose_12_tensor(n.grad));
  });
}

Var concat_last(const Var& a, const Var& b) {
  const Shape& sa = a.value().shape();
  const Shape& sb = b.value().shape();
  check(sa.size() == sb.size() && !sa.empty(), "concat_last", "rank mismatch");
  for (std::size_t i = 0; i + 1 < sa.size(); ++i)
    check(sa[i] == sb[i], "concat_last",
          "leading dims differ: " + shape_str(sa) + " vs " + shape_str(sb));
  const int ca = sa.back(), cb = sb.back();
  Shape so = sa;
  so.back() = ca + cb;
  Tensor out(so);
  const std::int64_t rows = out.numel() / (ca + cb);
  for (std::int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * (ca + cb), a.value().data() + r * ca, sizeof(Scalar) * ca);
    std::memcpy(out.data() + r * (ca + cb) + ca, b.value().data() + r * cb, sizeof(Scalar) * cb);
  }
  return make_node("concat_last", std::move(out), {a.node(), b.node()}, [ca, cb, rows](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor ga(n.parents[0]->value.shape());
      for (std::int64_t r = 0; r < rows; ++r)
        std::memcpy(ga.data() + r * ca, n.grad.data() + r * (ca + cb), sizeof(Scalar) * ca);
      accumulate_grad(*n.parents[0], ga);
    }
    if (n.parents[1]->requires_grad) {
      Tensor gb(n.parents[1]->value.shape());
      for (std::int64_t r = 0; r < rows; ++r)
        std::memcpy(gb.data() + r * cb, n.grad.data() + r * (ca + cb) + ca, sizeof(Scalar) * cb);
      accumulate_grad(*n.parents[1], gb);
    }
  });
}

namespace {

// Patch layout matches the weight layout [Co][kh][kw][Ci] flattened to
// [Co, kh*kw*Ci]; NHWC input makes each (kh,kw) slot a contiguous Ci run.
void im2col(const Tensor& x, int kh, int kw, int pad, Tensor& col) {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int OH = H + 2 * pad - kh + 1;
  const int OW = W + 2 * pad - kw + 1;
  const int K = kh * kw * C;
  col.fill(0.0);
  Scalar* dst_base = col.data();
  const Scalar* src_base = x.data();
  for (int b = 0; b < B; ++b)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        Scalar* dst =
            dst_base + ((static_cast<std::int64_t>(b) * OH + oh) * OW + ow) * K;
        for (int i = 0; i < kh; ++i) {
          const int ih = oh + i - pad;
          if (ih < 0 || ih >= H) continue;
          for (int j = 0; j < kw; ++j) {
            const int iw = ow + j - pad;
            if (iw < 0 || iw >= W) continue;
            std::memcpy(dst + (i * kw + j) * C,
                        src_base + ((static_cast<std::int64_t>(b) * H + ih) * W + iw) * C,
                        sizeof(Scalar) * static_cast<std::size_t>(C));
          }
        }
      }
}

void col2im_add(const Tensor& col, int kh, int kw, int pad, Tensor& dx) {
  const int B = dx.dim(0), H = dx.dim(1), W = dx.dim(2), C = dx.dim(3);
  const int OH = H + 2 * pad - kh + 1;
  const int OW = W + 2 * pad - kw + 1;
  const int K = kh * kw * C;
  const Scalar* src_base = col.data();
  Scalar* dst_base = dx.data();
  for (int b = 0; b < B; ++b)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        const Scalar* src =
            src_base + ((static_cast<std::int64_t>(b) * OH + oh) * OW + ow) * K;
        for (int i = 0; i < kh; ++i) {
          const int ih = oh + i - pad;
          if (ih < 0 || ih >= H) continue;
          for (int j = 0; j < kw; ++j) {
            const int iw = ow + j - pad;
            if (iw < 0 || iw >= W) continue;
            Scalar* dst = dst_base + ((static_cast<std::int64_t>(b) * H + ih) * W + iw) * C;
            const Scalar* s = src + (i * kw + j) * C;
            for (int c = 0; c < C; ++c) dst[c] += s[c];
          }
        }
      }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int kh, int kw, int pad) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "conv2d", "expected NHWC input, got " + shape_str(xv.shape()));
  const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ci = xv.dim(3);
  const int K = kh * kw * Ci;
  const Tensor& wv = w.value();
  check(wv.rank() == 2 && wv.dim(1) == K, "conv2d",
        "weight " + shape_str(wv.shape()) + " incompatible with K=" + std::to_string(K));
  const int Co = wv.dim(0);
  check(b.value().numel() == Co, "conv2d", "bias size mismatch");
  const int OH = H + 2 * pad - kh + 1;
  const int OW = W + 2 * pad - kw + 1;
  check(OH > 0 && OW > 0, "conv2d", "kernel larger than padded input");

  const std::int64_t rows = static_cast<std::int64_t>(B) * OH * OW;
  const bool pointwise = (kh == 1 && kw == 1 && pad == 0);
  Tensor out({B, OH, OW, Co});
  {
    Tensor col;
    const Scalar* col_data = xv.data();
    if (!pointwise) {
      col = Tensor({static_cast<int>(rows), K});
      im2col(xv, kh, kw, pad, col);
      col_data = col.data();
    }
    MapCM colM(col_data, rows, K);
    MapCM wM(wv.data(), Co, K);
    MapM outM(out.data(), rows, Co);
    outM.noalias() = colM * wM.transpose();
    MapCM bM(b.value().data(), 1, Co);
    outM.rowwise() += bM.row(0);
  }

  return make_node("conv2d", std::move(out), {x.node(), w.node(), b.node()},
                   [kh, kw, pad, rows, K, Co, pointwise](Node& n) {
                     Node& xn = *n.parents[0];
                     Node& wn = *n.parents[1];
                     Node& bn = *n.parents[2];
                     MapCM dyM(n.grad.data(), rows, Co);
                     Tensor col;
                     const Scalar* col_data = xn.value.data();
                     if (!pointwise && (wn.requires_grad || xn.requires_grad)) {
                       col = Tensor({static_cast<int>(rows), K});
                       im2col(xn.value, kh, kw, pad, col);
                       col_data = col.data();
                     }
                     if (wn.requires_grad) {
                       Tensor dw(wn.value.shape());
                       MapCM colM(col_data, rows, K);
                       MapM dwM(dw.data(), Co, K);
                       dwM.noalias() = dyM.transpose() * colM;
                       accumulate_grad(wn, dw);
                     }
                     if (bn.requires_grad) {
                       Tensor db(bn.value.shape());
                       colsum(n.grad.data(), rows, Co, db.data());
                       accumulate_grad(bn, db);
                     }
                     if (xn.requires_grad) {
                       MapCM wM(wn.value.data(), Co, K);
                       if (pointwise) {
                         Tensor dx(xn.value.shape());
                         MapM dxM(dx.data(), rows, K);
                         dxM.noalias() = dyM * wM;
                         accumulate_grad(xn, dx);
                       } else {
                         Tensor dcol({static_cast<int>(rows), K});
                         MapM dcolM(dcol.data(), rows, K);
                         dcolM.noalias() = dyM * wM;
                         Tensor dx(xn.value.shape());
                         col2im_add(dcol, kh, kw, pad, dx);
                         accumulate_grad(xn, dx);
                       }
                     }
                   });
}

Var conv_transpose2x2(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "conv_transpose2x2", "expected NHWC input");
  const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ci = xv.dim(3);
  const Tensor& wv = w.value();
  check(wv.rank() == 2 && wv.dim(0) == Ci && wv.dim(1) % 4 == 0, "conv_transpose2x2",
        "weight must be [Ci, 4*Co], got " + shape_str(wv.shape()));
  const int Co = wv.dim(1) / 4;
  check(b.value().numel() == Co, "conv_transpose2x2", "bias size mismatch");

  const std::int64_t rows = static_cast<std::int64_t>(B) * H * W;
  // Stride-2 2x2 kernel: output quadrants never overlap, so the op is one
  // GEMM [rows,Ci]x[Ci,4Co] followed by a spatial scatter.
  Tensor y4({static_cast<int>(rows), 4 * Co});
  {
    MapCM xM(xv.data(), rows, Ci);
    MapCM wM(wv.data(), Ci, 4 * Co);
    MapM y4M(y4.data(), rows, 4 * Co);
    y4M.noalias() = xM * wM;
  }
  Tensor out({B, 2 * H, 2 * W, Co});
  const Scalar* bp = b.value().data();
  for (int bb = 0; bb < B; ++bb)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const Scalar* src = y4.data() + ((static_cast<std::int64_t>(bb) * H + i) * W + j) * 4 * Co;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj) {
            Scalar* dst = out.data() +
                          (((static_cast<std::int64_t>(bb) * 2 * H + (2 * i + di)) * 2 * W +
                            (2 * j + dj))) *
                              Co;
            const Scalar* s = src + (di * 2 + dj) * Co;
            for (int c = 0; c < Co; ++c) dst[c] = s[c] + bp[c];
          }
      }

  return make_node(
      "conv_transpose2x2", std::move(out), {x.node(), w.node(), b.node()},
      [B, H, W, Ci, Co, rows](Node& n) {
        // Gather the 2x2 quadrants back into GEMM layout.
        Tensor dy4({static_cast<int>(rows), 4 * Co});
        for (int bb = 0; bb < B; ++bb)
          for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
              Scalar* dst = dy4.data() + ((static_cast<std::int64_t>(bb) * H + i) * W + j) * 4 * Co;
              for (int di = 0; di < 2; ++di)
                for (int dj = 0; dj < 2; ++dj)
                  std::memcpy(dst + (di * 2 + dj) * Co,
                              n.grad.data() +
                                  (((static_cast<std::int64_t>(bb) * 2 * H + (2 * i + di)) * 2 * W +
                                    (2 * j + dj))) *
                                      Co,
                              sizeof(Scalar) * static_cast<std::size_t>(Co));
            }
        Node& xn = *n.parents[0];
        Node& wn = *n.parents[1];
        Node& bn = *n.parents[2];
        MapCM dy4M(dy4.data(), rows, 4 * Co);
        if (wn.requires_grad) {
          Tensor dw(wn.value.shape());
          MapCM xM(xn.value.data(), rows, Ci);
          MapM dwM(dw.data(), Ci, 4 * Co);
          dwM.noalias() = xM.transpose() * dy4M;
          accumulate_grad(wn, dw);
        }
        if (bn.requires_grad) {
          Tensor db(bn.value.shape());
          for (std::int64_t r = 0; r < rows; ++r)
            for (int q = 0; q < 4; ++q)
              for (int c = 0; c < Co; ++c) db[c] += dy4[r * 4 * Co + q * Co + c];
          accumulate_grad(bn, db);
        }
        if (xn.requires_grad) {
          Tensor dx(xn.value.shape());
          MapCM wM(wn.value.data(), Ci, 4 * Co);
          MapM dxM(dx.data(), rows, Ci);
          dxM.noalias() = dy4M * wM.transpose();
          accumulate_grad(xn, dx);
        }
      });
}

Var maxpool2x2(const Var& x) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "maxpool2x2", "expected NHWC input");
  const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
  check(H % 2 == 0 && W % 2 == 0, "maxpool2x2",
        "spatial dims must be even, got " + shape_str(xv.shape()));
  const int OH = H / 2, OW = W / 2;
  Tensor out({B, OH, OW, C});
  auto argmax = std::make_shared<std::vector<std::uint8_t>>(
      static_cast<std::size_t>(out.numel()));
  for (int b = 0; b < B; ++b)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow)
        for (int c = 0; c < C; ++c) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          std::uint8_t best_q = 0;
          for (std::uint8_t q = 0; q < 4; ++q) {
            const int ih = 2 * oh + (q >> 1), iw = 2 * ow + (q & 1);
            const Scalar v = xv[((static_cast<std::int64_t>(b) * H + ih) * W + iw) * C + c];
            if (v > best) {
              best = v;
              best_q = q;
            }
          }
          const std::int64_t o = ((static_cast<std::int64_t>(b) * OH + oh) * OW + ow) * C + c;
          out[o] = best;
          (*argmax)[static_cast<std::size_t>(o)] = best_q;
        }
  return make_node("maxpool2x2", std::move(out), {x.node()},
                   [B, H, W, C, OH, OW, argmax](Node& n) {
                     Tensor dx(n.parents[0]->value.shape());
                     for (int b = 0; b < B; ++b)
                       for (int oh = 0; oh < OH; ++oh)
                         for (int ow = 0; ow < OW; ++ow)
                           for (int c = 0; c < C; ++c) {
                             const std::int64_t o =
                                 ((static_cast<std::int64_t>(b) * OH + oh) * OW + ow) * C + c;
                             const std::uint8_t q = (*argmax)[static_cast<std::size_t>(o)];
                             const int ih = 2 * oh + (q >> 1), iw = 2 * ow + (q & 1);
                             dx[((static_cast<std::int64_t>(b) * H + ih) * W + iw) * C + c] +=
                                 n.grad[o];
                           }
                     accumulate_grad(*n.parents[0], dx);
                   });
}

namespace {

constexpr Scalar kNormEps = 1e-5;

// Shared between instance_norm (rows = H*W per (b,c) slice, strided) and
// layer_norm (rows over the trailing dim, contiguous); both reduce to
// normalizing independent groups of size `gsize`.
struct NormStats {
  std::vector<Scalar> mean;
  std::vector<Scalar> inv_std;
};

}  // namespace

Var instance_norm(const Var& x, const Var& gamma, const Var& beta) {
  const Tensor& xv = x.value();
  check(xv.rank() == 4, "instance_norm", "expected NHWC input");
  const int B = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
  check(gamma.value().numel() == C && beta.value().numel() == C, "instance_norm",
        "affine params must have C=" + std::to_string(C));
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;

  auto stats = std::make_shared<NormStats>();
  stats->mean.assign(static_cast<std::size_t>(B) * C, 0.0);
  stats->inv_std.assign(static_cast<std::size_t>(B) * C, 0.0);

  Tensor out(xv.shape());
  const Scalar* g = gamma.value().data();
  const Scalar* be = beta.value().data();
  for (int b = 0; b < B; ++b) {
    Scalar* mu = stats->mean.data() + static_cast<std::size_t>(b) * C;
    Scalar* is = stats->inv_std.data() + static_cast<std::size_t>(b) * C;
    const Scalar* xb = xv.data() + static_cast<std::int64_t>(b) * plane * C;
    for (std::int64_t p = 0; p < plane; ++p)
      for (int c = 0; c < C; ++c) mu[c] += xb[p * C + c];
    for (int c = 0; c < C; ++c) mu[c] /= static_cast<Scalar>(plane);
    for (std::int64_t p = 0; p < plane; ++p)
      for (int c = 0; c < C; ++c) {
        const Scalar d = xb[p * C + c] - mu[c];
        is[c] += d * d;
      }
    for (int c = 0; c < C; ++c)
      is[c] = 1.0 / std::sqrt(is[c] / static_cast<Scalar>(plane) + kNormEps);
    Scalar* ob = out.data() + static_cast<std::int64_t>(b) * plane * C;
    for (std::int64_t p = 0; p < plane; ++p)
      for (int c = 0; c < C; ++c)
        ob[p * C + c] = g[c] * (xb[p * C + c] - mu[c]) * is[c] + be[c];
  }

  return make_node(
      "instance_norm", std::move(out), {x.node(), gamma.node(), beta.node()},
      [B, C, plane, stats](Node& n) {
        Node& xn = *n.parents[0];
        Node& gn = *n.parents[1];
        Node& bn = *n.parents[2];
        const Scalar* g = gn.value.data();
        Tensor dgamma({C});
        Tensor dbeta({C});
        Tensor dx;
        if (xn.requires_grad) dx = Tensor(xn.value.shape());
        const Scalar N = static_cast<Scalar>(plane);
        std::vector<Scalar> sum_dy(C), sum_dy_xhat(C);
        for (int b = 0; b < B; ++b) {
          const Scalar* mu = stats->mean.data() + static_cast<std::size_t>(b) * C;
          const Scalar* is = stats->inv_std.data() + static_cast<std::size_t>(b) * C;
          const Scalar* xb = xn.value.data() + static_cast<std::int64_t>(b) * plane * C;
          const Scalar* dyb = n.grad.data() + static_cast<std::int64_t>(b) * plane * C;
          std::fill(sum_dy.begin(), sum_dy.end(), 0.0);
          std::fill(sum_dy_xhat.begin(), sum_dy_xhat.end(), 0.0);
          for (std::int64_t p = 0; p < plane; ++p)
            for (int c = 0; c < C; ++c) {
              const Scalar xhat = (xb[p * C + c] - mu[c]) * is[c];
              sum_dy[c] += dyb[p * C + c];
              sum_dy_xhat[c] += dyb[p * C + c] * xhat;
            }
          for (int c = 0; c < C; ++c) {
            dbeta[c] += sum_dy[c];
            dgamma[c] += sum_dy_xhat[c];
          }
          if (xn.requires_grad) {
            Scalar* dxb = dx.data() + static_cast<std::int64_t>(b) * plane * C;
            for (std::int64_t p = 0; p < plane; ++p)
              for (int c = 0; c < C; ++c) {
                const Scalar xhat = (xb[p * C + c] - mu[c]) * is[c];
                dxb[p * C + c] = g[c] * is[c] / N *
                                 (N * dyb[p * C + c] - sum_dy[c] - xhat * sum_dy_xhat[c]);
              }
          }
        }
        if (gn.requires_grad) accumulate_grad(gn, dgamma);
        if (bn.requires_grad) accumulate_grad(bn, dbeta);
        if (xn.requires_grad) accumulate_grad(xn, dx);
      });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta) {
  const Tensor& xv = x.value();
  check(xv.rank() >= 1, "layer_norm", "rank-0 input");
  const int D = xv.shape().back();
  check(gamma.value().numel() == D && beta.value().numel() == D, "layer_norm",
        "affine params must have D=" + std::to_string(D));
  const std::int64_t rows = xv.numel() / D;

  auto stats = std::make_shared<NormStats>();
  stats->mean.resize(static_cast<std::size_t>(rows));
  stats->inv_std.resize(static_cast<std::size_t>(rows));

  Tensor out(xv.shape());
  const Scalar* g = gamma.value().data();
  const Scalar* be = beta.value().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* xr = xv.data() + r * D;
    Scalar mu = 0;
    for (int c = 0; c < D; ++c) mu += xr[c];
    mu /= D;
    Scalar var = 0;
    for (int c = 0; c < D; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    const Scalar is = 1.0 / std::sqrt(var / D + kNormEps);
    stats->mean[static_cast<std::size_t>(r)] = mu;
    stats->inv_std[static_cast<std::size_t>(r)] = is;
    Scalar* orow = out.data() + r * D;
    for (int c = 0; c < D; ++c) orow[c] = g[c] * (xr[c] - mu) * is + be[c];
  }

  return make_node(
      "layer_norm", std::move(out), {x.node(), gamma.node(), beta.node()},
      [D, rows, stats](Node& n) {
        Node& xn = *n.parents[0];
        Node& gn = *n.parents[1];
        Node& bn = *n.parents[2];
        const Scalar* g = gn.value.data();
        Tensor dgamma({D});
        Tensor dbeta({D});
        Tensor dx;
        if (xn.requires_grad) dx = Tensor(xn.value.shape());
        for (std::int64_t r = 0; r < rows; ++r) {
          const Scalar mu = stats->mean[static_cast<std::size_t>(r)];
          const Scalar is = stats->inv_std[static_cast<std::size_t>(r)];
          const Scalar* xr = xn.value.data() + r * D;
          const Scalar* dyr = n.grad.data() + r * D;
          Scalar sum_dy = 0, sum_dy_xhat = 0;
          for (int c = 0; c < D; ++c) {
            const Scalar xhat = (xr[c] - mu) * is;
            dgamma[c] += dyr[c] * xhat;
            dbeta[c] += dyr[c];
            sum_dy += dyr[c] * g[c];
            sum_dy_xhat += dyr[c] * g[c] * xhat;
          }
          if (xn.requires_grad) {
            Scalar* dxr = dx.data() + r * D;
            for (int c = 0; c < D; ++c) {
              const Scalar xhat = (xr[c] - mu) * is;
              dxr[c] = is / D * (D * dyr[c] * g[c] - sum_dy - xhat * sum_dy_xhat);
            }
          }
        }
        if (gn.requires_grad) accumulate_grad(gn, dgamma);
        if (bn.requires_grad) accumulate_grad(bn, dbeta);
        if (xn.requires_grad) accumulate_grad(xn, dx);
      });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  check(wv.rank() == 2, "linear", "weight must be [Din,Dout]");
  const int Din = wv.dim(0), Dout = wv.dim(1);
  check(xv.rank() >= 1 && xv.shape().back() == Din, "linear",
        "input " + shape_str(xv.shape()) + " incompatible with Din=" + std::to_string(Din));
  check(b.value().numel() == Dout, "linear", "bias size mismatch");
  const std::int64_t rows = xv.numel() / Din;

  Shape os = xv.shape();
  os.back() = Dout;
  Tensor out(os);
  {
    MapCM xM(xv.data(), rows, Din);
    MapCM wM(wv.data(), Din, Dout);
    MapM oM(out.data(), rows, Dout);
    oM.noalias() = xM * wM;
    MapCM bM(b.value().data(), 1, Dout);
    oM.rowwise() += bM.row(0);
  }
  return make_node("linear", std::move(out), {x.node(), w.node(), b.node()},
                   [rows, Din, Dout](Node& n) {
                     Node& xn = *n.parents[0];
                     Node& wn = *n.parents[1];
                     Node& bn = *n.parents[2];
                     MapCM dyM(n.grad.data(), rows, Dout);
                     if (wn.requires_grad) {
                       Tensor dw(wn.value.shape());
                       MapCM xM(xn.value.data(), rows, Din);
                       MapM dwM(dw.data(), Din, Dout);
                       dwM.noalias() = xM.transpose() * dyM;
                       accumulate_grad(wn, dw);
                     }
                     if (bn.requires_grad) {
                       Tensor db(bn.value.shape());
                       colsum(n.grad.data(), rows, Dout, db.data());
                       accumulate_grad(bn, db);
                     }
                     if (xn.requires_grad) {
                       Tensor dx(xn.value.shape());
                       MapCM wM(wn.value.data(), Din, Dout);
                       MapM dxM(dx.data(), rows, Din);
                       dxM.noalias() = dyM * wM.transpose();
                       accumulate_grad(xn, dx);
                     }
                   });
}

Var softmax_last(const Var& x) {
  const Tensor& xv = x.value();
  const int D = xv.shape().back();
  const std::int64_t rows = xv.numel() / D;
  Tensor out(xv.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const Scalar* xr = xv.data() + r * D;
    Scalar* orow = out.data() + r * D;
    Scalar m = xr[0];
    for (int c = 1; c < D; ++c) m = std::max(m, xr[c]);
    Scalar s = 0;
    for (int c = 0; c < D; ++c) {
      orow[c] = std::exp(xr[c] - m);
      s += orow[c];
    }
    for (int c = 0; c < D; ++c) orow[c] /= s;
  }
  return make_node("softmax_last", std::move(out), {x.node()}, [D, rows](Node& n) {
    Tensor dx(n.value.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
      const Scalar* y = n.value.data() + r * D;
      const Scalar* dy = n.grad.data() + r * D;
      Scalar dot = 0;
      for (int c = 0; c < D; ++c) dot += dy[c] * y[c];
      Scalar* dxr = dx.data() + r * D;
      for (int c = 0; c < D; ++c) dxr[c] = y[c] * (dy[c] - dot);
    }
    accumulate_grad(*n.parents[0], dx);
  });
}

Var matmul_batched(const Var& a, const Var& b, bool transpose_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check(av.rank() == bv.rank() && av.rank() >= 2, "matmul_batched", "rank mismatch");
  const int ra = av.rank();
  std::int64_t batch = 1;
  for (int i = 0; i < ra - 2; ++i) {
    check(av.dim(i) == bv.dim(i), "matmul_batched", "batch dims differ");
    batch *= av.dim(i);
  }
  const int M = av.dim(ra - 2), K = av.dim(ra - 1);
  const int N = transpose_b ? bv.dim(ra - 2) : bv.dim(ra - 1);
  const int Kb = transpose_b ? bv.dim(ra - 1) : bv.dim(ra - 2);
  check(K == Kb, "matmul_batched",
        "inner dims differ: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));

  Shape os(av.shape().begin(), av.shape().end() - 2);
  os.push_back(M);
  os.push_back(N);
  Tensor out(os);
  for (std::int64_t i = 0; i < batch; ++i) {
    MapCM aM(av.data() + i * M * K, M, K);
    MapM oM(out.data() + i * M * N, M, N);
    if (transpose_b) {
      MapCM bM(bv.data() + i * static_cast<std::int64_t>(N) * K, N, K);
      oM.noalias() = aM * bM.transpose();
    } else {
      MapCM bM(bv.data() + i * static_cast<std::int64_t>(K) * N, K, N);
      oM.noalias() = aM * bM;
    }
  }
  return make_node(
      "matmul_batched", std::move(out), {a.node(), b.node()},
      [batch, M, K, N, transpose_b](Node& n) {
        Node& an = *n.parents[0];
        Node& bn = *n.parents[1];
        Tensor da, db;
        if (an.requires_grad) da = Tensor(an.value.shape());
        if (bn.requires_grad) db = Tensor(bn.value.shape());
        for (std::int64_t i = 0; i < batch; ++i) {
          MapCM dyM(n.grad.data() + i * M * N, M, N);
          MapCM aM(an.value.data() + i * M * K, M, K);
          if (transpose_b) {
            MapCM bM(bn.value.data() + i * static_cast<std::int64_t>(N) * K, N, K);
            if (an.requires_grad) {
              MapM daM(da.data() + i * M * K, M, K);
              daM.noalias() = dyM * bM;
            }
            if (bn.requires_grad) {
              MapM dbM(db.data() + i * static_cast<std::int64_t>(N) * K, N, K);
              dbM.noalias() = dyM.transpose() * aM;
            }
          } else {
            MapCM bM(bn.value.data() + i * static_cast<std::int64_t>(K) * N, K, N);
            if (an.requires_grad) {
              MapM daM(da.data() + i * M * K, M, K);
              daM.noalias() = dyM * bM.transpose();
            }
            if (bn.requires_grad) {
              MapM dbM(db.data() + i * static_cast<std::int64_t>(K) * N, K, N);
              dbM.noalias() = aM.transpose() * dyM;
            }
          }
        }
        if (an.requires_grad) accumulate_grad(an, da);
        if (bn.requires_grad) accumulate_grad(bn, db);
      });
}

Var add_broadcast(const Var& x, const Var& p) {
  const Tensor& xv = x.value();
  const Tensor& pv = p.value();
  const std::int64_t inner = pv.numel();
  check(inner > 0 && xv.numel() % inner == 0, "add_broadcast",
        "cannot broadcast " + shape_str(pv.shape()) + " over " + shape_str(xv.shape()));
  const std::int64_t reps = xv.numel() / inner;
  Tensor out = xv;
  for (std::int64_t r = 0; r < reps; ++r)
    for (std::int64_t i = 0; i < inner; ++i) out[r * inner + i] += pv[i];
  return make_node("add_broadcast", std::move(out), {x.node(), p.node()},
                   [reps, inner](Node& n) {
                     if (n.parents[0]->requires_grad) accumulate_grad(*n.parents[0], n.grad);
                     if (n.parents[1]->requires_grad) {
                       Tensor dp(n.parents[1]->value.shape());
                       for (std::int64_t r = 0; r < reps; ++r)
                         for (std::int64_t i = 0; i < inner; ++i) dp[i] += n.grad[r * inner + i];
                       accumulate_grad(*n.parents[1], dp);
                     }
                   });
}

Var mean_all(const Var& a) {
  const std::int64_t n = a.value().numel();
  Scalar s = 0;
  for (std::int64_t i = 0; i < n; ++i) s += a.value()[i];
  Tensor out({1}, s / static_cast<Scalar>(n));
  return make_node("mean_all", std::move(out), {a.node()}, [n](Node& nd) {
    Tensor g(nd.parents[0]->value.shape(), nd.grad[0] / static_cast<Scalar>(n));
    accumulate_grad(*nd.parents[0], g);
  });
}

Var bce_with_logits_mean(const Var& logits, const Var& targets) {
  const Tensor& z = logits.value();
  const Tensor& t = targets.value();
  check(z.same_shape(t), "bce_with_logits",
        "shape mismatch: logits " + shape_str(z.shape()) + " vs targets " + shape_str(t.shape()));
  const std::int64_t n = z.numel();
  check(n > 0, "bce_with_logits", "empty input");
  Scalar sum = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    // max(z,0) - z*t + log(1+exp(-|z|)): exact for |z| up to ~1e308.
    const Scalar zi = z[i];
    sum += std::max(zi, 0.0) - zi * t[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  Tensor out({1}, sum / static_cast<Scalar>(n));
  return make_node("bce_with_logits", std::move(out), {logits.node(), targets.node()},
                   [n](Node& nd) {
                     Node& zn = *nd.parents[0];
                     if (!zn.requires_grad) return;
                     const Tensor& z = zn.value;
                     const Tensor& t = nd.parents[1]->value;
                     Tensor g(z.shape());
                     const Scalar c = nd.grad[0] / static_cast<Scalar>(n);
                     for (std::int64_t i = 0; i < n; ++i)
                       g[i] = c * (stable_sigmoid(z[i]) - t[i]);
                     accumulate_grad(zn, g);
                   });
}

}  // namespace strokeseg::nn
