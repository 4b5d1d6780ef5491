#include "strokeseg/nets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace strokeseg {

using nn::Shape;
using nn::Tensor;
using nn::Var;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kCkptMagic[8] = {'S', 'T', 'R', 'K', 'C', 'K', 'P', '1'};
constexpr int kMlpRatio = 4;

struct LinearP {
  int w = -1;
  int b = -1;
};
struct NormP {
  int g = -1;
  int b = -1;
};
struct StageP {
  LinearP conv1;
  NormP n1;
  LinearP conv2;
  NormP n2;
};
struct EncoderP {
  std::array<StageP, 4> stages;
};
struct BlockP {
  NormP ln1;
  LinearP wq, wk, wv, attn_proj;
  NormP ln2;
  LinearP fc1, fc2;
};
struct DecoderStageP {
  LinearP up;
  LinearP conv1;
  NormP n1;
  LinearP conv2;
  NormP n2;
};

Tensor nchw_to_nhwc(const Tensor& x) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor out({B, H, W, C});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const nn::Scalar* src = x.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
      nn::Scalar* dst = out.data() + static_cast<std::int64_t>(b) * H * W * C + c;
      for (std::int64_t p = 0; p < static_cast<std::int64_t>(H) * W; ++p) dst[p * C] = src[p];
    }
  return out;
}

}  // namespace

struct SegModel::Layout {
  EncoderP enc_a;  // DWI encoder, or the shared encoder
  EncoderP enc_b;  // ADC encoder (dual only)
  LinearP fusion;  // dual only
  LinearP patch_embed;
  int pos = -1;
  std::vector<BlockP> blocks;
  NormP ln_f;
  LinearP out_proj;
  std::array<DecoderStageP, 4> dec;
  LinearP head;
};

SegModel::~SegModel() = default;
SegModel::SegModel(SegModel&&) noexcept = default;
SegModel& SegModel::operator=(SegModel&&) noexcept = default;

std::string variant_name(Variant v) {
  return v == Variant::single_encoder ? "single_encoder" : "dual_encoder";
}

Variant variant_from_name(const std::string& name) {
  if (name == "single_encoder") return Variant::single_encoder;
  if (name == "dual_encoder") return Variant::dual_encoder;
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected single_encoder|dual_encoder)");
}

void ModelConfig::validate() const {
  if (slices_per_modality != 1 && slices_per_modality != 3)
    throw std::invalid_argument("model config: slices_per_modality must be 1 or 3, got " +
                                std::to_string(slices_per_modality));
  for (int i = 1; i < 4; ++i)
    if (encoder_widths[static_cast<std::size_t>(i)] <=
        encoder_widths[static_cast<std::size_t>(i - 1)])
      throw std::invalid_argument("model config: encoder_widths must be strictly increasing");
  if (encoder_widths[0] < 1)
    throw std::invalid_argument("model config: encoder widths must be positive");
  if (transformer_layers < 1)
    throw std::invalid_argument("model config: transformer_layers must be >= 1");
  if (transformer_heads < 1 || transformer_dim < 1 || transformer_dim % transformer_heads != 0)
    throw std::invalid_argument("model config: transformer_dim (" +
                                std::to_string(transformer_dim) +
                                ") must be divisible by transformer_heads (" +
                                std::to_string(transformer_heads) + ")");
  if (variant == Variant::dual_encoder && fusion_proj_width < 1)
    throw std::invalid_argument("model config: fusion_proj_width must be >= 1");
  if (input_hw < 16 || input_hw % 16 != 0)
    throw std::invalid_argument("model config: input_hw must be a positive multiple of 16");
}

ordered_json ModelConfig::to_json() const {
  ordered_json j;
  j["variant"] = variant_name(variant);
  j["slices_per_modality"] = slices_per_modality;
  j["encoder_widths"] = encoder_widths;
  j["transformer_layers"] = transformer_layers;
  j["transformer_heads"] = transformer_heads;
  j["transformer_dim"] = transformer_dim;
  j["fusion_proj_width"] = fusion_proj_width;
  j["input_hw"] = input_hw;
  return j;
}

ModelConfig ModelConfig::from_json(const ordered_json& j) {
  ModelConfig c;
  c.variant = variant_from_name(j.at("variant").get<std::string>());
  c.slices_per_modality = j.at("slices_per_modality").get<int>();
  const auto widths = j.at("encoder_widths").get<std::vector<int>>();
  if (widths.size() != 4)
    throw std::invalid_argument("model config: encoder_widths must have 4 entries");
  std::copy(widths.begin(), widths.end(), c.encoder_widths.begin());
  c.transformer_layers = j.at("transformer_layers").get<int>();
  c.transformer_heads = j.at("transformer_heads").get<int>();
  c.transformer_dim = j.at("transformer_dim").get<int>();
  c.fusion_proj_width = j.at("fusion_proj_width").get<int>();
  c.input_hw = j.at("input_hw").get<int>();
  c.validate();
  return c;
}

int SegModel::first_layer_in_channels() const {
  return config_.variant == Variant::single_encoder ? 2 * config_.slices_per_modality
                                                    : config_.slices_per_modality;
}

int SegModel::add_param(const std::string& name, const std::string& group, Tensor value) {
  params_.push_back(Parameter{name, group, nn::leaf(std::move(value), true), true});
  return static_cast<int>(params_.size()) - 1;
}

SegModel::SegModel(ModelConfig config, std::uint64_t init_seed)
    : config_(std::move(config)), layout_(std::make_unique<Layout>()) {
  config_.validate();
  std::mt19937_64 rng(init_seed ^ 0x5e6d0d31ull);
  std::normal_distribution<nn::Scalar> normal(0.0, 1.0);

  auto he = [&](Shape shape, int fan_in) {
    Tensor t(std::move(shape));
    const nn::Scalar std = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = normal(rng) * std;
    return t;
  };
  auto xavier = [&](int din, int dout) {
    Tensor t({din, dout});
    const nn::Scalar std = std::sqrt(2.0 / (din + dout));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = normal(rng) * std;
    return t;
  };

  auto conv3 = [&](const std::string& n, const std::string& g, int ci, int co) {
    LinearP p;
    p.w = add_param(n + ".weight", g, he({co, 9 * ci}, 9 * ci));
    p.b = add_param(n + ".bias", g, Tensor({co}));
    return p;
  };
  auto conv1 = [&](const std::string& n, const std::string& g, int ci, int co) {
    LinearP p;
    p.w = add_param(n + ".weight", g, he({co, ci}, ci));
    p.b = add_param(n + ".bias", g, Tensor({co}));
    return p;
  };
  auto up2 = [&](const std::string& n, const std::string& g, int ci, int co) {
    LinearP p;
    p.w = add_param(n + ".weight", g, he({ci, 4 * co}, ci));
    p.b = add_param(n + ".bias", g, Tensor({co}));
    return p;
  };
  auto dense = [&](const std::string& n, const std::string& g, int din, int dout) {
    LinearP p;
    p.w = add_param(n + ".weight", g, xavier(din, dout));
    p.b = add_param(n + ".bias", g, Tensor({dout}));
    return p;
  };
  auto norm = [&](const std::string& n, const std::string& g, int c) {
    NormP p;
    p.g = add_param(n + ".gamma", g, Tensor({c}, 1.0));
    p.b = add_param(n + ".beta", g, Tensor({c}));
    return p;
  };
  auto encoder = [&](const std::string& g, int in_channels) {
    EncoderP e;
    int ci = in_channels;
    for (int s = 0; s < 4; ++s) {
      const int co = config_.encoder_widths[static_cast<std::size_t>(s)];
      const std::string base = g + ".stage" + std::to_string(s);
      e.stages[static_cast<std::size_t>(s)] =
          StageP{conv3(base + ".conv1", g, ci, co), norm(base + ".norm1", g, co),
                 conv3(base + ".conv2", g, co, co), norm(base + ".norm2", g, co)};
      ci = co;
    }
    return e;
  };

  const auto& w = config_.encoder_widths;
  const bool dual = config_.variant == Variant::dual_encoder;
  if (dual) {
    layout_->enc_a = encoder("encoder_dwi", config_.slices_per_modality);
    layout_->enc_b = encoder("encoder_adc", config_.slices_per_modality);
  } else {
    layout_->enc_a = encoder("encoder_shared", 2 * config_.slices_per_modality);
  }

  const int cb = config_.bottleneck_width();
  if (dual) layout_->fusion = conv1("transformer.fusion_proj", "transformer", 2 * w[3], cb);
  const int dim = config_.transformer_dim;
  layout_->patch_embed = dense("transformer.patch_embed", "transformer", cb, dim);
  {
    Tensor pos({config_.tokens(), dim});
    for (std::int64_t i = 0; i < pos.numel(); ++i) pos[i] = normal(rng) * 0.02;
    layout_->pos = add_param("transformer.pos_embed", "transformer", std::move(pos));
  }
  for (int l = 0; l < config_.transformer_layers; ++l) {
    const std::string base = "transformer.block" + std::to_string(l);
    BlockP blk;
    blk.ln1 = norm(base + ".norm1", "transformer", dim);
    blk.wq = dense(base + ".q", "transformer", dim, dim);
    blk.wk = dense(base + ".k", "transformer", dim, dim);
    blk.wv = dense(base + ".v", "transformer", dim, dim);
    blk.attn_proj = dense(base + ".proj", "transformer", dim, dim);
    blk.ln2 = norm(base + ".norm2", "transformer", dim);
    blk.fc1 = dense(base + ".mlp1", "transformer", dim, kMlpRatio * dim);
    blk.fc2 = dense(base + ".mlp2", "transformer", kMlpRatio * dim, dim);
    layout_->blocks.push_back(blk);
  }
  layout_->ln_f = norm("transformer.final_norm", "transformer", dim);
  layout_->out_proj = dense("transformer.out_proj", "transformer", dim, cb);

  const int skip_mult = dual ? 2 : 1;
  for (int s = 3; s >= 0; --s) {
    const std::string base = "decoder.stage" + std::to_string(s);
    const int ci = s == 3 ? cb : w[static_cast<std::size_t>(s + 1)];
    const int co = w[static_cast<std::size_t>(s)];
    DecoderStageP d;
    d.up = up2(base + ".up", "decoder", ci, co);
    d.conv1 = conv3(base + ".conv1", "decoder", co + skip_mult * co, co);
    d.n1 = norm(base + ".norm1", "decoder", co);
    d.conv2 = conv3(base + ".conv2", "decoder", co, co);
    d.n2 = norm(base + ".norm2", "decoder", co);
    layout_->dec[static_cast<std::size_t>(s)] = d;
  }
  layout_->head = conv1("head.conv", "head", w[0], 1);
}

namespace {

struct GraphBuilder {
  const std::vector<Parameter>& params;

  Var p(int idx) const { return params[static_cast<std::size_t>(idx)].var; }

  Var conv3(const Var& x, const LinearP& c) const { return nn::conv2d(x, p(c.w), p(c.b), 3, 3, 1); }
  Var conv1(const Var& x, const LinearP& c) const { return nn::conv2d(x, p(c.w), p(c.b), 1, 1, 0); }
  Var norm(const Var& x, const NormP& n) const { return nn::instance_norm(x, p(n.g), p(n.b)); }
  Var lnorm(const Var& x, const NormP& n) const { return nn::layer_norm(x, p(n.g), p(n.b)); }
  Var dense(const Var& x, const LinearP& l) const { return nn::linear(x, p(l.w), p(l.b)); }

  Var conv_block(Var x, const StageP& s) const {
    x = nn::relu(norm(conv3(x, s.conv1), s.n1));
    x = nn::relu(norm(conv3(x, s.conv2), s.n2));
    return x;
  }

  Var encode(const Var& input, const EncoderP& enc, std::array<Var, 4>& skips) const {
    Var x = input;
    for (int s = 0; s < 4; ++s) {
      x = conv_block(x, enc.stages[static_cast<std::size_t>(s)]);
      skips[static_cast<std::size_t>(s)] = x;
      x = nn::maxpool2x2(x);
    }
    return x;
  }

  Var transform(const Var& bottleneck, const SegModel::Layout* ly, const ModelConfig& cfg) const;
};

}  // namespace

Var GraphBuilder::transform(const Var& bottleneck, const SegModel::Layout* ly,
                            const ModelConfig& cfg) const {
  const int B = bottleneck.value().dim(0);
  const int hb = cfg.bottleneck_hw();
  const int T = cfg.tokens();
  const int dim = cfg.transformer_dim;
  const int heads = cfg.transformer_heads;
  const int dh = dim / heads;
  const int cb = cfg.bottleneck_width();

  Var x = nn::reshape(bottleneck, {B, T, cb});
  x = dense(x, ly->patch_embed);
  x = nn::add_broadcast(x, p(ly->pos));
  for (const BlockP& blk : ly->blocks) {
    Var h = lnorm(x, blk.ln1);
    auto split_heads = [&](Var t) { return nn::transpose_12(nn::reshape(t, {B, T, heads, dh})); };
    Var q = split_heads(dense(h, blk.wq));
    Var k = split_heads(dense(h, blk.wk));
    Var v = split_heads(dense(h, blk.wv));
    Var att = nn::softmax_last(
        nn::scale(nn::matmul_batched(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))));
    Var ctx = nn::reshape(nn::transpose_12(nn::matmul_batched(att, v, false)), {B, T, dim});
    x = nn::add(x, dense(ctx, blk.attn_proj));
    Var m = dense(nn::gelu(dense(lnorm(x, blk.ln2), blk.fc1)), blk.fc2);
    x = nn::add(x, m);
  }
  x = lnorm(x, ly->ln_f);
  x = dense(x, ly->out_proj);
  return nn::reshape(x, {B, hb, hb, cb});
}

SegModel::ForwardResult SegModel::forward(const Tensor& dwi, const Tensor& adc) {
  const int S = config_.slices_per_modality;
  const int hw = config_.input_hw;
  auto check_input = [&](const Tensor& t, const char* name) {
    if (t.rank() != 4 || t.dim(1) != S || t.dim(2) != hw || t.dim(3) != hw)
      throw std::invalid_argument(std::string("forward: ") + name + " expected shape " +
                                  nn::shape_str({-1, S, hw, hw}) + ", got " +
                                  nn::shape_str(t.shape()));
  };
  check_input(dwi, "dwi");
  check_input(adc, "adc");
  if (dwi.dim(0) != adc.dim(0) || dwi.dim(0) < 1)
    throw std::invalid_argument("forward: batch sizes differ, got " + nn::shape_str(dwi.shape()) +
                                " vs " + nn::shape_str(adc.shape()));

  const int B = dwi.dim(0);
  GraphBuilder g{params_};
  ForwardResult result;

  Var x;
  std::array<Var, 4> skips_a, skips_b;
  const bool dual = config_.variant == Variant::dual_encoder;
  if (dual) {
    Var bottleneck_dwi = g.encode(nn::constant(nchw_to_nhwc(dwi)), layout_->enc_a, skips_a);
    Var bottleneck_adc = g.encode(nn::constant(nchw_to_nhwc(adc)), layout_->enc_b, skips_b);
    result.bottleneck_dwi = bottleneck_dwi;
    result.bottleneck_adc = bottleneck_adc;
    x = g.conv1(nn::concat_last(bottleneck_dwi, bottleneck_adc), layout_->fusion);
  } else {
    // early fusion: [dwi S | adc S] along the channel axis per batch item
    Tensor both({B, 2 * S, hw, hw});
    const std::int64_t plane = static_cast<std::int64_t>(hw) * hw;
    for (int b = 0; b < B; ++b) {
      std::memcpy(both.data() + static_cast<std::int64_t>(b) * 2 * S * plane,
                  dwi.data() + static_cast<std::int64_t>(b) * S * plane,
                  sizeof(nn::Scalar) * static_cast<std::size_t>(S * plane));
      std::memcpy(both.data() + (static_cast<std::int64_t>(b) * 2 * S + S) * plane,
                  adc.data() + static_cast<std::int64_t>(b) * S * plane,
                  sizeof(nn::Scalar) * static_cast<std::size_t>(S * plane));
    }
    x = g.encode(nn::constant(nchw_to_nhwc(both)), layout_->enc_a, skips_a);
    result.bottleneck = x;
  }

  x = g.transform(x, layout_.get(), config_);

  for (int s = 3; s >= 0; --s) {
    const DecoderStageP& d = layout_->dec[static_cast<std::size_t>(s)];
    x = nn::conv_transpose2x2(x, g.p(d.up.w), g.p(d.up.b));
    Var skip = dual ? nn::concat_last(skips_a[static_cast<std::size_t>(s)],
                                      skips_b[static_cast<std::size_t>(s)])
                    : skips_a[static_cast<std::size_t>(s)];
    x = nn::concat_last(x, skip);
    x = nn::relu(g.norm(g.conv3(x, d.conv1), d.n1));
    x = nn::relu(g.norm(g.conv3(x, d.conv2), d.n2));
  }
  Var logits = g.conv1(x, layout_->head);
  // NHWC with one channel has the same memory layout as [B,1,H,W]
  result.logits = nn::reshape(logits, {B, 1, hw, hw});
  return result;
}

std::vector<std::string> SegModel::group_names() const {
  std::vector<std::string> names;
  for (const auto& p : params_)
    if (std::find(names.begin(), names.end(), p.group) == names.end()) names.push_back(p.group);
  return names;
}

std::int64_t SegModel::parameter_count(const std::string& group) const {
  std::int64_t n = 0;
  for (const auto& p : params_)
    if (group.empty() || p.group == group) n += p.var.value().numel();
  return n;
}

void SegModel::set_group_trainable(const std::string& group, bool trainable) {
  bool found = false;
  for (auto& p : params_)
    if (p.group == group) {
      p.trainable = trainable;
      p.var->requires_grad = trainable;
      found = true;
    }
  if (!found) throw std::invalid_argument("unknown parameter group '" + group + "'");
}

bool SegModel::group_is_trainable(const std::string& group) const {
  for (const auto& p : params_)
    if (p.group == group) return p.trainable;
  throw std::invalid_argument("unknown parameter group '" + group + "'");
}

void SegModel::zero_grad() {
  for (auto& p : params_) p.var->grad = Tensor();
}

InferenceScope::InferenceScope(SegModel& model) : model_(model) {
  saved_.reserve(model.params_.size());
  for (auto& p : model.params_) {
    saved_.push_back(p.var->requires_grad);
    p.var->requires_grad = false;
  }
}

InferenceScope::~InferenceScope() {
  for (std::size_t i = 0; i < saved_.size(); ++i)
    model_.params_[i].var->requires_grad = saved_[i];
}

SegModel build_model(const ModelConfig& config, std::uint64_t init_seed) {
  return SegModel(config, init_seed);
}

void save_checkpoint(const SegModel& model, const ordered_json& train_state,
                     const std::filesystem::path& path) {
  ordered_json meta;
  meta["format"] = 1;
  meta["model_config"] = model.config().to_json();
  meta["train_state"] = train_state;
  ordered_json plist = ordered_json::array();
  for (const auto& p : model.parameters()) {
    ordered_json e;
    e["name"] = p.name;
    e["group"] = p.group;
    e["shape"] = p.var.value().shape();
    plist.push_back(e);
  }
  meta["params"] = plist;
  const std::string header = meta.dump();
  const std::uint32_t header_len = static_cast<std::uint32_t>(header.size());

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out.write(kCkptMagic, sizeof(kCkptMagic));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header.data(), header_len);
    for (const auto& p : model.parameters())
      out.write(reinterpret_cast<const char*>(p.var.value().data()),
                static_cast<std::streamsize>(p.var.value().numel() * sizeof(nn::Scalar)));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

SegModel load_checkpoint(const std::filesystem::path& path, ordered_json* train_state) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("checkpoint " + path.string() + ": bad magic");
  std::uint32_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len)))
    throw std::runtime_error("checkpoint " + path.string() + ": truncated header");
  std::string header(header_len, '\0');
  if (!in.read(header.data(), header_len))
    throw std::runtime_error("checkpoint " + path.string() + ": truncated header");

  ordered_json meta;
  try {
    meta = ordered_json::parse(header);
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + ": header parse error: " + e.what());
  }
  SegModel model(ModelConfig::from_json(meta.at("model_config")));
  const auto& plist = meta.at("params");
  auto& params = model.parameters();
  if (plist.size() != params.size())
    throw std::runtime_error("checkpoint " + path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = plist[i];
    if (e.at("name").get<std::string>() != params[i].name)
      throw std::runtime_error("checkpoint " + path.string() + ": parameter order mismatch at " +
                               params[i].name);
    const auto shape = e.at("shape").get<Shape>();
    if (shape != params[i].var.value().shape())
      throw std::runtime_error("checkpoint " + path.string() + ": shape mismatch for " +
                               params[i].name);
    Tensor& v = params[i].var.value();
    if (!in.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(v.numel() * sizeof(nn::Scalar))))
      throw std::runtime_error("checkpoint " + path.string() + ": truncated payload at " +
                               params[i].name);
  }
  if (train_state) *train_state = meta.at("train_state");
  return model;
}

}  // namespace strokeseg
