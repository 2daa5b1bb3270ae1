#pragma once

namespace vermouth {

// Subcommands: gen-data, pretrain, train, eval, extract, sweep, ablate, plot.
// Returns 0 on success, 1 on usage errors, 2 on runtime failures.
// VERMOUTH_PRECISION=f32|f64 picks the scalar type (default f32).
int cli_main(int argc, char** argv);

}  // namespace vermouth
