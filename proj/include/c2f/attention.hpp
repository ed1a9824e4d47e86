#pragma once

#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "c2f/autograd.hpp"
#include "c2f/rng.hpp"

namespace c2f {

/// Weights over the L regions of a feature grid; nonnegative, summing to 1.
struct AttentionMap {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<double> weights;

  static AttentionMap from(std::size_t grid_h, std::size_t grid_w, Var weights) {
    if (weights.size() != grid_h * grid_w)
      throw ShapeError("attention map of " + std::to_string(weights.size()) + " weights does not fit a " +
                       std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    return AttentionMap{grid_h, grid_w, weights.value().values};
  }
};

struct GlobalAttnParams {
  Tensor score_w, score_b;    // [D, 1], [1]
  Tensor init_c_w, init_c_b;  // [D, H], [H]
  Tensor init_h_w, init_h_b;  // [D, H], [H]

  static GlobalAttnParams init(std::size_t channels, std::size_t hidden, Rng& rng) {
    GlobalAttnParams p;
    p.score_w = glorot({channels, 1}, channels, 1, rng);
    p.score_b = Tensor({1});
    p.init_c_w = glorot({channels, hidden}, channels, hidden, rng);
    p.init_c_b = Tensor({hidden});
    p.init_h_w = glorot({channels, hidden}, channels, hidden, rng);
    p.init_h_b = Tensor({hidden});
    return p;
  }
};

/// One-hidden-layer perceptron g(a_i, h) over the concatenation [a_i, h].
/// The first layer's weight is stored split into its region and hidden-state
/// blocks, which is the same affine map as one [D + H, width] matrix.
struct LocalAttnParams {
  Tensor region_w;            // [D, width]
  Tensor hidden_w;            // [H, width]
  Tensor layer_b;             // [width]
  Tensor out_w, out_b;        // [width, 1], [1]

  static LocalAttnParams init(std::size_t channels, std::size_t hidden, std::size_t width, Rng& rng) {
    LocalAttnParams p;
    p.region_w = glorot({channels, width}, channels + hidden, width, rng);
    p.hidden_w = glorot({hidden, width}, channels + hidden, width, rng);
    p.layer_b = Tensor({width});
    p.out_w = glorot({width, 1}, width, 1, rng);
    p.out_b = Tensor({1});
    return p;
  }
};

struct AttentionResult {
  Var weights;  // [1, L]
  Var context;  // [1, D]
};

inline void require_regions(const char* who, Var grid) {
  if (grid.value().rank() != 2)
    throw ShapeError(std::string(who) + ": grid must be [L, D], got " + to_string(grid.shape()));
}

/// alpha_i = softmax_i(tanh(a_i W_g + b_g)), context = sum_i alpha_i a_i.
template <typename Params>
AttentionResult global_attention(Tape& tape, Var grid, Params& params) {
  require_regions("global_attention", grid);
  const std::size_t regions = grid.shape()[0];
  Var scores = tanh(add(matmul(grid, tape.param(params.score_w)), tape.param(params.score_b)));
  Var alpha = softmax(reshape(scores, {1, regions}));
  return AttentionResult{alpha, matmul(alpha, grid)};
}

struct LstmState {
  Var h;  // [1, H]
  Var c;  // [1, H]
};

/// c_0 = tanh(I_c(z / L)), h_0 = tanh(I_h(z / L)).
template <typename Params>
LstmState init_states(Tape& tape, Var context, std::size_t regions, Params& params) {
  if (regions == 0) throw std::invalid_argument("init_states: region count must be at least 1");
  Var avg = scale(context, 1.0 / static_cast<double>(regions));
  Var c0 = tanh(add(matmul(avg, tape.param(params.init_c_w)), tape.param(params.init_c_b)));
  Var h0 = tanh(add(matmul(avg, tape.param(params.init_h_w)), tape.param(params.init_h_b)));
  return LstmState{h0, c0};
}

/// Region half of the perceptron's first layer; independent of the step, so
/// callers unrolling many steps can compute it once.
template <typename Params>
Var project_regions(Tape& tape, Var grid, Params& params) {
  require_regions("local_attention", grid);
  return matmul(grid, tape.param(params.region_w));
}

/// beta_ti = softmax_i(g(a_i, h_prev)), context z_t = sum_i beta_ti a_i.
template <typename Params>
AttentionResult local_attention(Tape& tape, Var grid, Var h_prev, Params& params,
                                std::optional<Var> region_proj = std::nullopt) {
  require_regions("local_attention", grid);
  const std::size_t regions = grid.shape()[0];
  if (h_prev.size() != params.hidden_w.dim(0))
    throw ShapeError("local_attention: hidden state has " + std::to_string(h_prev.size()) +
                     " entries, perceptron expects " + std::to_string(params.hidden_w.dim(0)));
  Var proj = region_proj ? *region_proj : project_regions(tape, grid, params);
  Var h = reshape(h_prev, {1, h_prev.size()});
  Var row = add(matmul(h, tape.param(params.hidden_w)), tape.param(params.layer_b));
  Var hidden = tanh(add(proj, row));
  Var scores = add(matmul(hidden, tape.param(params.out_w)), tape.param(params.out_b));
  Var beta = softmax(reshape(scores, {1, regions}));
  return AttentionResult{beta, matmul(beta, grid)};
}

/// Unweighted region mean with the matching uniform weights; used when local
/// attention is disabled.
inline AttentionResult uniform_attention(Tape& tape, Var grid) {
  require_regions("uniform_attention", grid);
  const std::size_t regions = grid.shape()[0], d = grid.shape()[1];
  Var weights = tape.constant(Tensor({1, regions}, 1.0 / static_cast<double>(regions)));
  return AttentionResult{weights, reshape(mean(grid, 0), {1, d})};
}

}  // namespace c2f
