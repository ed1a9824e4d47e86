#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "c2f/attention.hpp"
#include "c2f/autograd.hpp"
#include "c2f/rng.hpp"

namespace c2f {

/// One LSTM gate: pre-activation = y W_x + h W_h + z W_z + b.
struct GateParams {
  Tensor w_x, w_h, w_z, b;

  static GateParams init(std::size_t input, std::size_t hidden, std::size_t context, Rng& rng, double bias = 0.0) {
    const std::size_t fan_in = input + hidden + context;
    return GateParams{glorot({input, hidden}, fan_in, hidden, rng), glorot({hidden, hidden}, fan_in, hidden, rng),
                      glorot({context, hidden}, fan_in, hidden, rng), Tensor({hidden}, bias)};
  }
};

struct DecoderParams {
  Tensor embed;  // [C + 1, E]; row C is the start token
  GateParams cell, input, forget, output;
  Tensor pred_w, pred_b;  // [H, C], [C]

  static DecoderParams init(std::size_t classes, std::size_t embed_dim, std::size_t hidden, std::size_t context,
                            Rng& rng, std::size_t extra_input = 0) {
    DecoderParams p;
    p.embed = uniform_tensor({classes + 1, embed_dim}, -0.1, 0.1, rng);
    const std::size_t in = embed_dim + extra_input;
    p.cell = GateParams::init(in, hidden, context, rng);
    p.input = GateParams::init(in, hidden, context, rng);
    p.forget = GateParams::init(in, hidden, context, rng, 1.0);  // remember by default
    p.output = GateParams::init(in, hidden, context, rng);
    p.pred_w = glorot({hidden, classes}, hidden, classes, rng);
    p.pred_b = Tensor({classes});
    return p;
  }

  std::size_t classes() const { return pred_w.dim(1); }
  std::size_t hidden() const { return pred_w.dim(0); }
  std::size_t embed_dim() const { return embed.dim(1); }
  std::size_t input_dim() const { return cell.w_x.dim(0); }
  std::size_t start_token() const { return embed.dim(0) - 1; }
};

/// Binary ground truth plus the order in which positives supervise decoder steps.
struct LabelSet {
  std::vector<std::uint8_t> y;
  std::vector<std::size_t> step_targets;

  std::size_t classes() const { return y.size(); }
  std::size_t positives() const { return static_cast<std::size_t>(std::count(y.begin(), y.end(), 1)); }

  /// Orders the positives of `y` by `class_rank` (position of each class in
  /// the global supervision order).
  static LabelSet make(std::vector<std::uint8_t> y, const std::vector<std::size_t>& class_order) {
    if (class_order.size() != y.size())
      throw std::invalid_argument("LabelSet: class order covers " + std::to_string(class_order.size()) +
                                  " classes, labels have " + std::to_string(y.size()));
    LabelSet s{std::move(y), {}};
    for (std::size_t c : class_order)
      if (s.y.at(c)) s.step_targets.push_back(c);
    return s;
  }

  void validate() const {
    std::vector<std::uint8_t> seen(y.size(), 0);
    for (std::size_t c : step_targets) {
      if (c >= y.size() || !y[c] || seen[c]) throw std::invalid_argument("LabelSet: step targets inconsistent with labels");
      seen[c] = 1;
    }
    if (step_targets.size() != positives()) throw std::invalid_argument("LabelSet: step targets miss a positive class");
  }
};

/// Classes sorted by descending frequency, ties to the lower index.
inline std::vector<std::size_t> frequency_order(const std::vector<std::size_t>& counts) {
  std::vector<std::size_t> order(counts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  return order;
}

namespace detail {
template <typename Params>
Var gate(Tape& tape, const Var& y, const Var& h, const Var& z, Params& g) {
  Var pre = add(matmul(y, tape.param(g.w_x)), matmul(h, tape.param(g.w_h)));
  pre = add(pre, matmul(z, tape.param(g.w_z)));
  return add(pre, tape.param(g.b));
}
}  // namespace detail

/// One recurrence: g, i, f, o gates, then c = f*c_prev + i*g, h = o*tanh(c).
/// All vectors are [1, n] rows.
template <typename Params>
LstmState lstm_step(Tape& tape, Var y_in, Var h_prev, Var c_prev, Var z, Params& params) {
  const std::size_t hdim = params.hidden();
  if (y_in.shape() != Shape{1, params.input_dim()} || h_prev.shape() != Shape{1, hdim} ||
      c_prev.shape() != Shape{1, hdim} || z.shape() != Shape{1, params.cell.w_z.dim(0)})
    throw ShapeError("lstm_step: inputs " + to_string(y_in.shape()) + ", " + to_string(h_prev.shape()) + ", " +
                     to_string(c_prev.shape()) + ", " + to_string(z.shape()) + " do not match parameters");
  Var g = tanh(detail::gate(tape, y_in, h_prev, z, params.cell));
  Var i = sigmoid(detail::gate(tape, y_in, h_prev, z, params.input));
  Var f = sigmoid(detail::gate(tape, y_in, h_prev, z, params.forget));
  Var o = sigmoid(detail::gate(tape, y_in, h_prev, z, params.output));
  Var c = add(mul(f, c_prev), mul(i, g));
  Var h = mul(o, tanh(c));
  return LstmState{h, c};
}

/// p_t = sigmoid(h_t W_p + b_p), shape [1, C].
template <typename Params>
Var predict_step(Tape& tape, Var h, Params& params) {
  if (h.size() != params.hidden())
    throw ShapeError("predict_step: hidden state " + to_string(h.shape()) + " vs head input " +
                     std::to_string(params.hidden()));
  Var row = reshape(h, {1, h.size()});
  return sigmoid(add(matmul(row, tape.param(params.pred_w)), tape.param(params.pred_b)));
}

/// Embedding row lookup as a [1, E] row.
template <typename Params>
Var embed_token(Tape& tape, std::size_t token, Params& params) {
  const std::size_t e = params.embed_dim();
  if (token > params.start_token()) throw std::out_of_range("embed_token: token " + std::to_string(token));
  std::vector<std::size_t> idx(e);
  std::iota(idx.begin(), idx.end(), token * e);
  return reshape(gather(tape.param(params.embed), std::move(idx)), {1, e});
}

/// p_hat_j = max_t Q[t, j].
inline Var aggregate(Var predictions) {
  if (predictions.value().rank() != 2) throw ShapeError("aggregate: predictions must be [T, C]");
  return max(predictions, 0);
}

/// Row-major T x C matrix of per-step sigmoid scores.
struct PredictionMatrix {
  std::size_t steps = 0;
  std::size_t classes = 0;
  std::vector<double> scores;

  double at(std::size_t t, std::size_t c) const { return scores[t * classes + c]; }

  static PredictionMatrix from(Var q) {
    if (q.value().rank() != 2) throw ShapeError("PredictionMatrix: expected [T, C]");
    return PredictionMatrix{q.shape()[0], q.shape()[1], q.value().values};
  }
};

struct UnrollOptions {
  std::size_t steps = 1;
  bool use_global = true;
  bool use_local = true;
};

struct UnrollTrace {
  Var predictions;  // [T, C]
  Var aggregated;   // [C]
  AttentionMap global;
  std::vector<AttentionMap> local;
  std::vector<std::size_t> fed_tokens;  // decoder input token per step
  LstmState initial;
};

struct DecoderInput {
  Var grid;  // [L, D]
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::optional<Var> global_feature;  // [1, D_fc], concatenated to the step-1 input when present
};

/// Runs global attention and state initialization once, then T steps of
/// local attention -> lstm_step -> predict_step.
///
/// With supervision (teacher forcing) step t > 1 consumes the embedding of
/// step_targets[t - 2], padded with the start token once targets run out.
/// Without it, step t > 1 consumes the highest-scoring class of p_{t-1} that
/// has not been fed yet (ties to the lower index).
template <typename DecParams, typename GlobalParams, typename LocalParams>
UnrollTrace unroll(Tape& tape, const DecoderInput& input, DecParams& dec, GlobalParams& global_params,
                   LocalParams& local_params, const UnrollOptions& opts, const LabelSet* supervision = nullptr) {
  if (opts.steps == 0) throw std::invalid_argument("unroll: T must be at least 1");
  if (supervision && supervision->step_targets.size() > opts.steps)
    throw std::invalid_argument("unroll: " + std::to_string(supervision->step_targets.size()) +
                                " supervised targets exceed T = " + std::to_string(opts.steps));
  if (supervision && supervision->classes() != dec.classes())
    throw std::invalid_argument("unroll: label set class count does not match decoder");
  Var grid = input.grid;
  require_regions("unroll", grid);
  const std::size_t regions = grid.shape()[0];
  const std::size_t hdim = dec.hidden();
  const std::size_t classes = dec.classes();
  const std::size_t extra = dec.input_dim() - dec.embed_dim();
  if (extra != (input.global_feature ? input.global_feature->size() : 0))
    throw ShapeError("unroll: decoder input width does not match the supplied global feature");

  UnrollTrace trace;
  AttentionResult g = global_attention(tape, grid, global_params);
  trace.global = AttentionMap::from(input.grid_h, input.grid_w, g.weights);
  if (opts.use_global) {
    trace.initial = init_states(tape, g.context, regions, global_params);
  } else {
    Var zeros = tape.constant(Tensor({1, hdim}));
    trace.initial = LstmState{zeros, zeros};
  }

  std::optional<Var> proj;
  if (opts.use_local) proj = project_regions(tape, grid, local_params);
  Var extra_zeros = extra ? tape.constant(Tensor({1, extra})) : Var{};

  LstmState state = trace.initial;
  std::vector<Var> rows;
  std::vector<std::uint8_t> fed(classes, 0);
  std::size_t token = dec.start_token();
  for (std::size_t t = 0; t < opts.steps; ++t) {
    if (t > 0) {
      if (supervision) {
        token = t - 1 < supervision->step_targets.size() ? supervision->step_targets[t - 1] : dec.start_token();
      } else {
        const Tensor& prev = rows.back().value();
        token = dec.start_token();
        double best = -1.0;
        for (std::size_t c = 0; c < classes; ++c)
          if (!fed[c] && prev[c] > best) {
            best = prev[c];
            token = c;
          }
        if (token < classes) fed[token] = 1;
      }
    }
    trace.fed_tokens.push_back(token);
    Var y = embed_token(tape, token, dec);
    if (extra) y = concat({y, t == 0 ? reshape(*input.global_feature, {1, extra}) : extra_zeros});
    AttentionResult local = opts.use_local ? local_attention(tape, grid, state.h, local_params, proj)
                                           : uniform_attention(tape, grid);
    trace.local.push_back(AttentionMap::from(input.grid_h, input.grid_w, local.weights));
    state = lstm_step(tape, y, state.h, state.c, local.context, dec);
    rows.push_back(predict_step(tape, state.h, dec));
  }
  trace.predictions = reshape(concat(rows), {opts.steps, classes});
  trace.aggregated = aggregate(trace.predictions);
  return trace;
}

}  // namespace c2f
