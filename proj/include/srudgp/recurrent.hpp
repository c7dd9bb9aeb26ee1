#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "srudgp/autodiff.hpp"
#include "srudgp/svgp.hpp"

namespace srudgp {

/// Result of running the element-wise SRU recurrence over precomputed
/// transforms. `state` has T + 1 rows: c_0 followed by c_1..c_T.
struct SruScan {
  Matrix output;  // h_t, T x D
  Matrix state;   // (T + 1) x D
  Matrix forget;  // phi_t, T x D
  Matrix reset;   // r_t, T x D
};

/// phi_t = sigmoid(xf_t + v_f * c_{t-1})
/// c_t   = phi_t * c_{t-1} + (1 - phi_t) * xc_t
/// r_t   = sigmoid(xr_t + v_r * c_{t-1})
/// h_t   = r_t * c_t + (1 - r_t) * xh_t
inline SruScan sru_scan(const Matrix& xf, const Matrix& xc, const Matrix& xr, const Matrix& xh, const RowVector& vf,
                        const RowVector& vr, const RowVector& c0) {
  const Eigen::Index steps = xf.rows();
  const Eigen::Index width = c0.size();
  for (const Matrix* m : {&xf, &xc, &xr, &xh}) {
    if (m->rows() != steps || m->cols() != width) throw InputError("sru: transform shapes disagree");
  }
  if (vf.size() != width || vr.size() != width) throw InputError("sru: gate vector width mismatch");
  SruScan s;
  s.output.resize(steps, width);
  s.state.resize(steps + 1, width);
  s.forget.resize(steps, width);
  s.reset.resize(steps, width);
  s.state.row(0) = c0;
  for (Eigen::Index t = 0; t < steps; ++t) {
    const RowVector prev = s.state.row(t);
    for (Eigen::Index j = 0; j < width; ++j) {
      const double f = ad::sigmoid(xf(t, j) + vf(j) * prev(j));
      const double c = f * prev(j) + (1.0 - f) * xc(t, j);
      const double r = ad::sigmoid(xr(t, j) + vr(j) * prev(j));
      s.forget(t, j) = f;
      s.reset(t, j) = r;
      s.state(t + 1, j) = c;
      s.output(t, j) = r * c + (1.0 - r) * xh(t, j);
    }
  }
  return s;
}

namespace ad {

/// Differentiable recurrence. Returns a (T + 1) x D matrix whose first T rows
/// are h_1..h_T and whose last row is c_T. c_0 is a constant.
inline Var sru_recurrence(const Var& xf, const Var& xc, const Var& xr, const Var& xh, const Var& vf, const Var& vr,
                          const RowVector& c0) {
  const SruScan scan = sru_scan(xf.value(), xc.value(), xr.value(), xh.value(), vf.value().row(0),
                                vr.value().row(0), c0);
  const Eigen::Index steps = scan.output.rows();
  Matrix out(steps + 1, c0.size());
  out.topRows(steps) = scan.output;
  out.row(steps) = scan.state.row(steps);
  return xf.tape().record(
      std::move(out), {xf, xc, xr, xh, vf, vr},
      [xf, xc, xr, xh, vf, vr, scan](Tape& t, const Matrix& g, const Matrix&) {
        const Eigen::Index steps = scan.output.rows();
        const Eigen::Index width = scan.state.cols();
        const RowVector v_f = vf.value().row(0);
        const RowVector v_r = vr.value().row(0);
        Matrix gf(steps, width), gc(steps, width), gr(steps, width), gh(steps, width);
        RowVector gvf = RowVector::Zero(width);
        RowVector gvr = RowVector::Zero(width);
        RowVector carry = g.row(steps);  // dL/dc_t flowing back from later steps
        for (Eigen::Index s = steps; s-- > 0;) {
          for (Eigen::Index j = 0; j < width; ++j) {
            const double prev = scan.state(s, j);
            const double c = scan.state(s + 1, j);
            const double f = scan.forget(s, j);
            const double r = scan.reset(s, j);
            const double gout = g(s, j);
            const double xh_v = xh.value()(s, j);
            const double xc_v = xc.value()(s, j);
            double gc_t = carry(j) + gout * r;
            const double g_reset_pre = gout * (c - xh_v) * r * (1.0 - r);
            gh(s, j) = gout * (1.0 - r);
            gr(s, j) = g_reset_pre;
            const double g_forget_pre = gc_t * (prev - xc_v) * f * (1.0 - f);
            gc(s, j) = gc_t * (1.0 - f);
            gf(s, j) = g_forget_pre;
            gvf(j) += g_forget_pre * prev;
            gvr(j) += g_reset_pre * prev;
            carry(j) = gc_t * f + g_forget_pre * v_f(j) + g_reset_pre * v_r(j);
          }
        }
        t.accumulate(xf, gf);
        t.accumulate(xc, gc);
        t.accumulate(xr, gr);
        t.accumulate(xh, gh);
        t.accumulate(vf, gvf);
        t.accumulate(vr, gvr);
      });
}

}  // namespace ad

/// Standard-normal stream for the reparameterized samples. A zero source
/// returns zeros, which turns every sample into its mean.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : rng_(seed) {}
  static NoiseSource zeros() {
    NoiseSource n(0);
    n.zero_ = true;
    return n;
  }

  Matrix normal(Eigen::Index rows, Eigen::Index cols) {
    if (zero_) return Matrix::Zero(rows, cols);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist_(rng_);
    return m;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_;
  bool zero_ = false;
};

// ---------------------------------------------------------------------------
// SRU (neural) cell

struct SruCellParams {
  Matrix w_forget, w_cell, w_reset, w_highway;  // D_out x D_in
  Vector b_forget, b_cell, b_reset, b_highway;  // D_out
  Vector v_forget, v_reset;                     // D_out
  Vector c0;                                    // D_out, fixed

  Eigen::Index input_dim() const { return w_forget.cols(); }
  Eigen::Index output_dim() const { return w_forget.rows(); }

  void validate() const {
    const Eigen::Index out = output_dim();
    const Eigen::Index in = input_dim();
    for (const Matrix* w : {&w_forget, &w_cell, &w_reset, &w_highway}) {
      if (w->rows() != out || w->cols() != in) throw ConfigError("sru: weight matrices disagree in shape");
      if (!w->allFinite()) throw DomainError("sru: weights must be finite");
    }
    for (const Vector* b : {&b_forget, &b_cell, &b_reset, &b_highway, &v_forget, &v_reset, &c0}) {
      if (b->size() != out) throw ConfigError("sru: vector width mismatch");
      if (!b->allFinite()) throw DomainError("sru: vectors must be finite");
    }
  }

  static SruCellParams zeros(Eigen::Index input_dim, Eigen::Index output_dim) {
    SruCellParams p;
    for (Matrix* w : {&p.w_forget, &p.w_cell, &p.w_reset, &p.w_highway}) *w = Matrix::Zero(output_dim, input_dim);
    for (Vector* b : {&p.b_forget, &p.b_cell, &p.b_reset, &p.b_highway, &p.v_forget, &p.v_reset, &p.c0}) {
      *b = Vector::Zero(output_dim);
    }
    return p;
  }

  /// Weights N(0, 1/D_in), zero biases, v = 1.
  static SruCellParams random_init(Eigen::Index input_dim, Eigen::Index output_dim, std::mt19937_64& rng) {
    SruCellParams p = zeros(input_dim, output_dim);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(input_dim)));
    for (Matrix* w : {&p.w_forget, &p.w_cell, &p.w_reset, &p.w_highway}) {
      for (Eigen::Index i = 0; i < w->size(); ++i) w->data()[i] = normal(rng);
    }
    p.v_forget.setOnes();
    p.v_reset.setOnes();
    return p;
  }
};

struct SruOutput {
  Matrix output;       // T x D_out
  Vector final_state;  // c_T
};

namespace ad {

struct SruVars {
  Var w_forget, w_cell, w_reset, w_highway;  // stored transposed: D_in x D_out
  Var b_forget, b_cell, b_reset, b_highway;  // 1 x D_out
  Var v_forget, v_reset;                     // 1 x D_out
  RowVector c0;
};

inline SruVars bind(Binder& binder, const SruCellParams& p, const std::string& prefix) {
  SruVars v;
  v.w_forget = transpose(binder(prefix + ".W_f", p.w_forget));
  v.w_cell = transpose(binder(prefix + ".W_c", p.w_cell));
  v.w_reset = transpose(binder(prefix + ".W_r", p.w_reset));
  v.w_highway = transpose(binder(prefix + ".W_h", p.w_highway));
  v.b_forget = binder(prefix + ".b_f", p.b_forget.transpose());
  v.b_cell = binder(prefix + ".b_c", p.b_cell.transpose());
  v.b_reset = binder(prefix + ".b_r", p.b_reset.transpose());
  v.b_highway = binder(prefix + ".b_h", p.b_highway.transpose());
  v.v_forget = binder(prefix + ".v_f", p.v_forget.transpose());
  v.v_reset = binder(prefix + ".v_r", p.v_reset.transpose());
  v.c0 = p.c0.transpose();
  return v;
}

/// All four affine maps are computed for the whole sequence before the
/// recurrence runs.
inline Var sru_forward(const SruVars& v, const Var& h) {
  const Var xf = add_rowwise(h * v.w_forget, v.b_forget);
  const Var xc = add_rowwise(h * v.w_cell, v.b_cell);
  const Var xr = add_rowwise(h * v.w_reset, v.b_reset);
  const Var xh = add_rowwise(h * v.w_highway, v.b_highway);
  return sru_recurrence(xf, xc, xr, xh, v.v_forget, v.v_reset, v.c0);
}

}  // namespace ad

inline SruOutput sru_forward(const SruCellParams& params, const Matrix& h_prev) {
  params.validate();
  if (h_prev.cols() != params.input_dim()) throw InputError("sru_forward: input width mismatch");
  ad::Tape tape(false);
  ad::Binder binder(tape, nullptr);
  const Matrix out = ad::sru_forward(ad::bind(binder, params, "sru"), tape.constant(h_prev)).value();
  const Eigen::Index steps = h_prev.rows();
  return {out.topRows(steps), out.row(steps).transpose()};
}

// ---------------------------------------------------------------------------
// SRU-DGP cell: the four affine maps replaced by GP functions.

enum Gate : std::size_t { kForget = 0, kCell = 1, kReset = 2, kHighway = 3 };
inline constexpr std::array<const char*, 4> kGateNames{"xi_f", "xi_c", "xi_r", "xi_h"};

struct SruDgpCellParams {
  std::array<SvgpLayerParams, 4> gp;  // forget, cell, reset, highway
  Vector v_forget, v_reset;
  Vector c0;
  bool freeze_v = true;  // v vectors excluded from training

  Eigen::Index input_dim() const { return gp[0].input_dim(); }
  Eigen::Index output_dim() const { return gp[0].output_dim(); }

  void validate() const {
    for (const SvgpLayerParams& f : gp) {
      f.validate();
      if (f.input_dim() != input_dim() || f.output_dim() != output_dim()) {
        throw ConfigError("sru-dgp: the four GP functions must share input and output widths");
      }
    }
    for (const Vector* v : {&v_forget, &v_reset, &c0}) {
      if (v->size() != output_dim()) throw ConfigError("sru-dgp: vector width mismatch");
    }
  }

  static SruDgpCellParams random_init(const Kernel& kernel, Eigen::Index inducing_count, Eigen::Index input_dim,
                                      Eigen::Index output_dim, Eigen::Index feature_count, std::mt19937_64& rng) {
    SruDgpCellParams p;
    for (SvgpLayerParams& f : p.gp) {
      f = SvgpLayerParams::random_init(kernel, inducing_count, input_dim, output_dim, feature_count, rng);
    }
    p.v_forget = Vector::Ones(output_dim);
    p.v_reset = Vector::Ones(output_dim);
    p.c0 = Vector::Zero(output_dim);
    return p;
  }
};

// ---------------------------------------------------------------------------
// Layer stack

struct FeedForwardLayer {
  SvgpLayerParams gp;
  Eigen::Index input_dim() const { return gp.input_dim(); }
  Eigen::Index output_dim() const { return gp.output_dim(); }
};

using Layer = std::variant<FeedForwardLayer, SruDgpCellParams, SruCellParams>;

inline std::string layer_kind_name(const Layer& layer) {
  switch (layer.index()) {
    case 0: return "ff";
    case 1: return "sru-dgp";
    default: return "sru-nn";
  }
}

inline Eigen::Index layer_input_dim(const Layer& layer) {
  return std::visit([](const auto& l) { return l.input_dim(); }, layer);
}
inline Eigen::Index layer_output_dim(const Layer& layer) {
  return std::visit([](const auto& l) { return l.output_dim(); }, layer);
}

inline void validate_stack(const std::vector<Layer>& layers) {
  if (layers.empty()) throw ConfigError("model needs at least one layer");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    std::visit(
        [](const auto& l) {
          if constexpr (std::is_same_v<std::decay_t<decltype(l)>, FeedForwardLayer>) {
            l.gp.validate();
          } else {
            l.validate();
          }
        },
        layers[i]);
    if (i > 0 && layer_input_dim(layers[i]) != layer_output_dim(layers[i - 1])) {
      throw ConfigError("layer " + std::to_string(i) + " expects width " +
                        std::to_string(layer_input_dim(layers[i])) + " but layer " + std::to_string(i - 1) +
                        " produces " + std::to_string(layer_output_dim(layers[i - 1])));
    }
  }
}

/// Mean propagates posterior means (generation). SampleUtterance draws one
/// correlated sample per GP function over the whole sequence using the
/// low-rank covariance; SampleFrame draws independently per frame.
enum class StackMode { Mean, SampleUtterance, SampleFrame };

inline Eigen::Index feature_noise_rows(const SvgpLayerParams& p) {
  return p.kernel.kind == KernelKind::Linear ? p.input_dim() : p.features.feature_count();
}

namespace ad {

struct GpRun {
  Var value;     // sample or mean
  Var mean;
  Var variance;  // set only when requested or needed for sampling
  Var kl;        // set only when requested
};

inline GpRun run_gp(Binder& binder, const SvgpLayerParams& p, const std::string& prefix, const Var& input,
                    StackMode mode, bool want_variance, bool want_kl, NoiseSource& noise,
                    const SvgpOptions& options) {
  const SvgpVars v = bind(binder, p, prefix);
  const Conditional c = condition(v, input, options);
  GpRun run;
  run.mean = predictive_mean(c, v);
  if (want_variance || mode == StackMode::SampleFrame) run.variance = predictive_variance(c, v, options);
  switch (mode) {
    case StackMode::Mean:
      run.value = run.mean;
      break;
    case StackMode::SampleUtterance: {
      Tape& tape = binder.tape();
      const Var feature_noise = tape.constant(noise.normal(feature_noise_rows(p), p.output_dim()));
      const Var inducing_noise = tape.constant(noise.normal(p.inducing_count(), p.output_dim()));
      run.value = sample_lowrank(c, v, feature_noise, inducing_noise);
      break;
    }
    case StackMode::SampleFrame:
      run.value = sample_diag(run.mean, run.variance, binder.tape().constant(noise.normal(input.rows(), p.output_dim())));
      break;
  }
  if (want_kl) run.kl = kl_divergence(v, c.chol_zz);
  return run;
}

struct StackRun {
  std::vector<Var> outputs;  // one per layer; the last is the final mean
  Var final_variance;        // T x D_out, zero for deterministic top layers
  std::vector<Var> kl;       // per layer, when requested
  int gp_calls = 0;
};

/// Runs every layer on the tape. In sampling modes each hidden layer output is
/// a reparameterized draw; the top feed-forward GP reports its predictive mean
/// and variance instead of a draw.
inline StackRun stack_forward(Binder& binder, const std::vector<Layer>& layers, const Var& x, StackMode mode,
                              bool want_kl, NoiseSource& noise, const SvgpOptions& options) {
  StackRun run;
  Tape& tape = binder.tape();
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    const bool top = i + 1 == layers.size();
    Var kl = tape.constant(0.0);
    try {
      if (const auto* ff = std::get_if<FeedForwardLayer>(&layers[i])) {
        const bool want_variance = top && mode != StackMode::Mean;
        const GpRun g = run_gp(binder, ff->gp, prefix, h, top ? StackMode::Mean : mode, want_variance, want_kl, noise,
                               options);
        ++run.gp_calls;
        h = g.value;
        if (top && want_variance) run.final_variance = g.variance;
        if (want_kl) kl = g.kl;
      } else if (const auto* cell = std::get_if<SruDgpCellParams>(&layers[i])) {
        std::array<Var, 4> xi;
        for (std::size_t k = 0; k < 4; ++k) {
          const GpRun g = run_gp(binder, cell->gp[k], prefix + "." + kGateNames[k], h, mode, false, want_kl, noise,
                                 options);
          ++run.gp_calls;
          xi[k] = g.value;
          if (want_kl) kl = kl + g.kl;
        }
        const Var vf = binder(prefix + ".v_f", cell->v_forget.transpose());
        const Var vr = binder(prefix + ".v_r", cell->v_reset.transpose());
        const Var rec = sru_recurrence(xi[kForget], xi[kCell], xi[kReset], xi[kHighway], vf, vr, cell->c0.transpose());
        h = slice_rows(rec, 0, x.rows());
      } else {
        const auto& sru = std::get<SruCellParams>(layers[i]);
        h = slice_rows(sru_forward(bind(binder, sru, prefix), h), 0, x.rows());
      }
    } catch (const SingularityError& e) {
      throw SingularityError(prefix + ": " + e.what(), e.largest_jitter());
    } catch (const DomainError& e) {
      throw DomainError(prefix + ": " + e.what());
    }
    run.outputs.push_back(h);
    if (want_kl) run.kl.push_back(kl);
  }
  if (mode != StackMode::Mean && !run.final_variance.valid()) {
    run.final_variance = tape.constant(Matrix::Zero(h.rows(), h.cols()));
  }
  return run;
}

}  // namespace ad

struct SruDgpOutput {
  Matrix output;
  Vector final_state;
  int gp_call_count = 0;
};

/// SRU-DGP cell forward. Each GP function is evaluated once over all frames
/// (mean, or one utterance-level draw using `noise`), then the element-wise
/// recurrence runs.
inline SruDgpOutput sru_dgp_forward(const SruDgpCellParams& params, const Matrix& h_prev, StackMode mode,
                                    NoiseSource& noise, const SvgpOptions& options = {}) {
  params.validate();
  ad::Tape tape(false);
  ad::Binder binder(tape, nullptr);
  const ad::Var input = tape.constant(h_prev);
  std::array<ad::Var, 4> xi;
  SruDgpOutput out;
  for (std::size_t k = 0; k < 4; ++k) {
    xi[k] = ad::run_gp(binder, params.gp[k], kGateNames[k], input, mode, false, false, noise, options).value;
    ++out.gp_call_count;
  }
  const Matrix rec = ad::sru_recurrence(xi[kForget], xi[kCell], xi[kReset], xi[kHighway],
                                        tape.constant(params.v_forget.transpose()),
                                        tape.constant(params.v_reset.transpose()), params.c0.transpose())
                         .value();
  out.output = rec.topRows(h_prev.rows());
  out.final_state = rec.row(h_prev.rows()).transpose();
  return out;
}

struct StackResult {
  std::vector<Matrix> outputs;  // per layer
  Matrix final_variance;        // empty in mean mode
  int gp_call_count = 0;
};

inline StackResult stack_forward(const std::vector<Layer>& layers, const Matrix& x, StackMode mode, NoiseSource& noise,
                                 const SvgpOptions& options = {}) {
  validate_stack(layers);
  if (x.cols() != layer_input_dim(layers.front())) throw InputError("stack_forward: input width mismatch");
  ad::Tape tape(false);
  ad::Binder binder(tape, nullptr);
  const ad::StackRun run = ad::stack_forward(binder, layers, tape.constant(x), mode, false, noise, options);
  StackResult out;
  for (const ad::Var& v : run.outputs) out.outputs.push_back(v.value());
  if (run.final_variance.valid()) out.final_variance = run.final_variance.value();
  out.gp_call_count = run.gp_calls;
  return out;
}

}  // namespace srudgp
