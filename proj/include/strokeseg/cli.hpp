#pragma once

namespace strokeseg {

/// Entry point behind the `strokeseg` binary. Subcommands: phantom, split,
/// preprocess, train, evaluate, predict. Returns 0 on success, 1 on usage
/// errors, 2 on runtime errors.
int cli_dispatch(int argc, const char* const* argv);

}  // namespace strokeseg
