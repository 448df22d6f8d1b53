#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geokr/error.hpp"
#include "geokr/geoknow.hpp"
#include "geokr/rng.hpp"
#include "geokr/tensor.hpp"

namespace geokr {

// Probabilities are clamped to this floor before any log.
inline constexpr double kLogEps = 1e-12;

struct ConvStage {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 2;
};

// Conv/ReLU stack -> global average pool -> linear head. Kernel must be odd
// so the zero padding of kernel/2 keeps the stride arithmetic symmetric.
struct EncoderConfig {
  std::size_t in_channels = 3;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<ConvStage> stages = {{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
  std::size_t output_dim = kActiveClassCount;

  std::size_t representation_dim() const {
    if (stages.empty()) raise(Errc::InvalidConfig, "encoder needs at least one stage");
    return stages.back().out_channels;
  }

  // (height, width) after each stage
  std::vector<std::pair<std::size_t, std::size_t>> stage_dims() const {
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    std::size_t h = height, w = width;
    for (const ConvStage& s : stages) {
      const std::size_t pad = s.kernel / 2;
      h = (h + 2 * pad - s.kernel) / s.stride + 1;
      w = (w + 2 * pad - s.kernel) / s.stride + 1;
      dims.emplace_back(h, w);
    }
    return dims;
  }

  void validate() const {
    if (in_channels == 0 || height == 0 || width == 0 || output_dim == 0)
      raise(Errc::InvalidConfig, "encoder dims must be positive");
    if (stages.empty()) raise(Errc::InvalidConfig, "encoder needs at least one stage");
    std::size_t h = height, w = width;
    for (const ConvStage& s : stages) {
      if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0)
        raise(Errc::InvalidConfig, "conv stage fields must be positive");
      if (s.kernel % 2 == 0) raise(Errc::InvalidConfig, "conv kernel must be odd");
      const std::size_t pad = s.kernel / 2;
      if (h + 2 * pad < s.kernel || w + 2 * pad < s.kernel)
        raise(Errc::InvalidConfig, "feature map collapsed below kernel size");
      h = (h + 2 * pad - s.kernel) / s.stride + 1;
      w = (w + 2 * pad - s.kernel) / s.stride + 1;
      if (h == 0 || w == 0) raise(Errc::InvalidConfig, "feature map collapsed to zero");
    }
  }

  bool operator==(const EncoderConfig& other) const {
    if (in_channels != other.in_channels || height != other.height || width != other.width ||
        output_dim != other.output_dim || stages.size() != other.stages.size())
      return false;
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (stages[i].out_channels != other.stages[i].out_channels ||
          stages[i].kernel != other.stages[i].kernel || stages[i].stride != other.stages[i].stride)
        return false;
    return true;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["in_channels"] = in_channels;
    j["height"] = height;
    j["width"] = width;
    nlohmann::ordered_json st = nlohmann::ordered_json::array();
    for (const ConvStage& s : stages)
      st.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}});
    j["stages"] = std::move(st);
    j["output_dim"] = output_dim;
    return j;
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig cfg;
    try {
      cfg.in_channels = j.at("in_channels").get<std::size_t>();
      cfg.height = j.at("height").get<std::size_t>();
      cfg.width = j.at("width").get<std::size_t>();
      cfg.stages.clear();
      for (const auto& s : j.at("stages")) {
        ConvStage st;
        st.out_channels = s.at("out_channels").get<std::size_t>();
        st.kernel = s.at("kernel").get<std::size_t>();
        st.stride = s.at("stride").get<std::size_t>();
        cfg.stages.push_back(st);
      }
      cfg.output_dim = j.at("output_dim").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::MalformedHeader, std::string("encoder config: ") + e.what());
    }
    cfg.validate();
    return cfg;
  }
};

template <typename T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
};

template <typename T>
struct ParameterSet {
  std::vector<Param<T>> params;
  bool has_grads = false;

  Param<T>& find(const std::string& name) {
    for (Param<T>& p : params)
      if (p.name == name) return p;
    raise(Errc::ArchitectureMismatch, "no parameter named " + name);
  }
  const Param<T>& find(const std::string& name) const {
    for (const Param<T>& p : params)
      if (p.name == name) return p;
    raise(Errc::ArchitectureMismatch, "no parameter named " + name);
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const Param<T>& p : params) n += p.value.size();
    return n;
  }

  void zero_grads() {
    for (Param<T>& p : params) std::fill(p.grad.begin(), p.grad.end(), T{0});
    has_grads = false;
  }
};

// He-normal weights, zero biases. Draws happen in parameter order so the
// result is a pure function of the config and the generator state.
template <typename T>
ParameterSet<T> init_parameters(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParameterSet<T> set;
  auto add = [&set](std::string name, std::vector<std::size_t> shape) -> Param<T>& {
    Param<T> p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    std::size_t n = 1;
    for (std::size_t d : p.shape) n *= d;
    p.value.assign(n, T{0});
    p.grad.assign(n, T{0});
    set.params.push_back(std::move(p));
    return set.params.back();
  };
  std::size_t in_ch = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const ConvStage& s = cfg.stages[i];
    Param<T>& w = add("stage" + std::to_string(i) + ".weight",
                      {s.out_channels, in_ch, s.kernel, s.kernel});
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_ch * s.kernel * s.kernel));
    for (T& v : w.value) v = static_cast<T>(rng.normal(0.0, stddev));
    add("stage" + std::to_string(i) + ".bias", {s.out_channels});
    in_ch = s.out_channels;
  }
  Param<T>& fcw = add("fc.weight", {cfg.output_dim, cfg.representation_dim()});
  const double fc_std = std::sqrt(2.0 / static_cast<double>(cfg.representation_dim()));
  for (T& v : fcw.value) v = static_cast<T>(rng.normal(0.0, fc_std));
  add("fc.bias", {cfg.output_dim});
  return set;
}

template <typename T>
struct ForwardTrace {
  bool evaluated = false;
  Tensor<T> input;                       // B x C x H x W
  std::vector<Tensor<T>> activations;    // post-ReLU, one per stage
  Tensor<T> pooled;                      // B x D
  Tensor<T> logits;                      // B x K
};

namespace detail {

template <typename T>
void conv_forward(const Tensor<T>& in, const std::vector<T>& w, const std::vector<T>& b,
                  const ConvStage& s, Tensor<T>& out) {
  const std::size_t batch = in.dim(0), in_ch = in.dim(1), ih = in.dim(2), iw = in.dim(3);
  const std::size_t oh = out.dim(2), ow = out.dim(3);
  const std::size_t pad = s.kernel / 2;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t oc = 0; oc < s.out_channels; ++oc)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = b[oc];
          for (std::size_t ic = 0; ic < in_ch; ++ic)
            for (std::size_t ky = 0; ky < s.kernel; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * s.stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
              const T* in_row = &in.data[((n * in_ch + ic) * ih + static_cast<std::size_t>(iy)) * iw];
              const T* w_row = &w[((oc * in_ch + ic) * s.kernel + ky) * s.kernel];
              for (std::size_t kx = 0; kx < s.kernel; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * s.stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
                acc += w_row[kx] * in_row[ix];
              }
            }
          out.at4(n, oc, oy, ox) = acc;
        }
}

template <typename T>
void conv_backward(const Tensor<T>& in, const std::vector<T>& w, const ConvStage& s,
                   const Tensor<T>& dout, std::vector<T>& dw, std::vector<T>& db, Tensor<T>* din) {
  const std::size_t batch = in.dim(0), in_ch = in.dim(1), ih = in.dim(2), iw = in.dim(3);
  const std::size_t oh = dout.dim(2), ow = dout.dim(3);
  const std::size_t pad = s.kernel / 2;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t oc = 0; oc < s.out_channels; ++oc)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T g = dout.at4(n, oc, oy, ox);
          if (g == T{0}) continue;
          db[oc] += g;
          for (std::size_t ic = 0; ic < in_ch; ++ic)
            for (std::size_t ky = 0; ky < s.kernel; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * s.stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
              const std::size_t in_base = ((n * in_ch + ic) * ih + static_cast<std::size_t>(iy)) * iw;
              const std::size_t w_base = ((oc * in_ch + ic) * s.kernel + ky) * s.kernel;
              for (std::size_t kx = 0; kx < s.kernel; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * s.stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
                dw[w_base + kx] += g * in.data[in_base + static_cast<std::size_t>(ix)];
                if (din) din->data[in_base + static_cast<std::size_t>(ix)] += g * w[w_base + kx];
              }
            }
        }
}

}  // namespace detail

template <typename T>
ForwardTrace<T> forward_batch(const EncoderConfig& cfg, const ParameterSet<T>& params,
                              const Tensor<T>& input) {
  cfg.validate();
  if (input.rank() != 4 || input.dim(1) != cfg.in_channels || input.dim(2) != cfg.height ||
      input.dim(3) != cfg.width)
    raise(Errc::ShapeMismatch,
          "encoder input " + shape_string(input.shape) + " does not match configured " +
              std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.height) + "x" +
              std::to_string(cfg.width));
  const std::size_t batch = input.dim(0);
  ForwardTrace<T> trace;
  trace.input = input;
  const auto dims = cfg.stage_dims();
  const Tensor<T>* cur = &trace.input;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const ConvStage& s = cfg.stages[i];
    Tensor<T> out = Tensor<T>::zeros({batch, s.out_channels, dims[i].first, dims[i].second});
    detail::conv_forward(*cur, params.find("stage" + std::to_string(i) + ".weight").value,
                         params.find("stage" + std::to_string(i) + ".bias").value, s, out);
    for (T& v : out.data) v = std::max(v, T{0});
    trace.activations.push_back(std::move(out));
    cur = &trace.activations.back();
  }
  const std::size_t d = cfg.representation_dim();
  const std::size_t spatial = dims.back().first * dims.back().second;
  trace.pooled = Tensor<T>::zeros({batch, d});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < d; ++c) {
      T acc = 0;
      const T* base = &cur->data[(n * d + c) * spatial];
      for (std::size_t i = 0; i < spatial; ++i) acc += base[i];
      trace.pooled.at2(n, c) = acc / static_cast<T>(spatial);
    }
  const std::vector<T>& fcw = params.find("fc.weight").value;
  const std::vector<T>& fcb = params.find("fc.bias").value;
  trace.logits = Tensor<T>::zeros({batch, cfg.output_dim});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t k = 0; k < cfg.output_dim; ++k) {
      T acc = fcb[k];
      for (std::size_t c = 0; c < d; ++c) acc += fcw[k * d + c] * trace.pooled.at2(n, c);
      trace.logits.at2(n, k) = acc;
    }
  trace.evaluated = true;
  return trace;
}

// Accumulates parameter gradients from dL/dlogits. The trace must come from
// forward_batch on the same parameters.
template <typename T>
void backward_batch(const EncoderConfig& cfg, ParameterSet<T>& params, const ForwardTrace<T>& trace,
                    const Tensor<T>& dlogits) {
  if (!trace.evaluated) raise(Errc::GraphNotEvaluated, "backward before forward");
  const std::size_t batch = trace.input.dim(0);
  if (dlogits.rank() != 2 || dlogits.dim(0) != batch || dlogits.dim(1) != cfg.output_dim)
    raise(Errc::ShapeMismatch, "dlogits shape " + shape_string(dlogits.shape));
  const auto dims = cfg.stage_dims();
  const std::size_t d = cfg.representation_dim();
  const std::size_t spatial = dims.back().first * dims.back().second;

  const std::vector<T>& fcw = params.find("fc.weight").value;
  std::vector<T>& dfcw = params.find("fc.weight").grad;
  std::vector<T>& dfcb = params.find("fc.bias").grad;
  Tensor<T> dpooled = Tensor<T>::zeros({batch, d});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t k = 0; k < cfg.output_dim; ++k) {
      const T g = dlogits.at2(n, k);
      if (g == T{0}) continue;
      dfcb[k] += g;
      for (std::size_t c = 0; c < d; ++c) {
        dfcw[k * d + c] += g * trace.pooled.at2(n, c);
        dpooled.at2(n, c) += g * fcw[k * d + c];
      }
    }

  // pool -> last activation
  Tensor<T> dact = Tensor<T>::zeros(trace.activations.back().shape);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < d; ++c) {
      const T g = dpooled.at2(n, c) / static_cast<T>(spatial);
      T* base = &dact.data[(n * d + c) * spatial];
      for (std::size_t i = 0; i < spatial; ++i) base[i] = g;
    }

  for (std::size_t i = cfg.stages.size(); i-- > 0;) {
    const Tensor<T>& act = trace.activations[i];
    for (std::size_t j = 0; j < dact.data.size(); ++j)
      if (act.data[j] <= T{0}) dact.data[j] = T{0};
    const Tensor<T>& in = i == 0 ? trace.input : trace.activations[i - 1];
    Tensor<T> din;
    Tensor<T>* din_ptr = nullptr;
    if (i > 0) {
      din = Tensor<T>::zeros(in.shape);
      din_ptr = &din;
    }
    detail::conv_backward(in, params.find("stage" + std::to_string(i) + ".weight").value,
                          cfg.stages[i], dact,
                          params.find("stage" + std::to_string(i) + ".weight").grad,
                          params.find("stage" + std::to_string(i) + ".bias").grad, din_ptr);
    if (i > 0) dact = std::move(din);
  }
  params.has_grads = true;
}

// Numerically stable row-wise softmax.
template <typename T>
Tensor<T> softmax_batch(const Tensor<T>& logits) {
  if (logits.rank() != 2) raise(Errc::ShapeMismatch, "softmax expects rank-2 logits");
  Tensor<T> probs = Tensor<T>::zeros(logits.shape);
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  for (std::size_t n = 0; n < batch; ++n) {
    T peak = logits.at2(n, 0);
    for (std::size_t j = 1; j < k; ++j) peak = std::max(peak, logits.at2(n, j));
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(static_cast<double>(logits.at2(n, j) - peak));
      probs.at2(n, j) = static_cast<T>(e);
      total += e;
    }
    for (std::size_t j = 0; j < k; ++j)
      probs.at2(n, j) = static_cast<T>(static_cast<double>(probs.at2(n, j)) / total);
  }
  return probs;
}

// -sum_i A_i ln S_i per sample, averaged over the batch. dprobs, when
// requested, is dL/dS including the clamp mask.
template <typename T>
double loss_supervised(const Tensor<T>& probs, const std::vector<std::array<double, kActiveClassCount>>& targets,
                       Tensor<T>* dprobs = nullptr) {
  const std::size_t batch = probs.dim(0), k = probs.dim(1);
  if (targets.size() != batch) raise(Errc::ShapeMismatch, "target count != batch");
  if (k != kActiveClassCount) raise(Errc::ShapeMismatch, "probs must have one column per class");
  if (dprobs) *dprobs = Tensor<T>::zeros(probs.shape);
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < k; ++j) {
      const double a = targets[n][j];
      if (a == 0.0) continue;
      const double s = static_cast<double>(probs.at2(n, j));
      const double clamped = std::max(s, kLogEps);
      total -= a * std::log(clamped);
      if (dprobs && s > kLogEps) dprobs->at2(n, j) = static_cast<T>(-a / clamped * inv_b);
    }
  return total * inv_b;
}

// 0 ln 0 counts as 0.
inline double entropy(const std::array<double, kActiveClassCount>& a) {
  double h = 0.0;
  for (double v : a)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// sum_i A_i ln(A_i / S_i), averaged over the batch. Same gradient in S as the
// supervised loss; the entropy term is constant.
template <typename T>
double loss_kl(const Tensor<T>& probs, const std::vector<std::array<double, kActiveClassCount>>& targets,
               Tensor<T>* dprobs = nullptr) {
  const std::size_t batch = probs.dim(0), k = probs.dim(1);
  if (targets.size() != batch) raise(Errc::ShapeMismatch, "target count != batch");
  if (k != kActiveClassCount) raise(Errc::ShapeMismatch, "probs must have one column per class");
  if (dprobs) *dprobs = Tensor<T>::zeros(probs.shape);
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < k; ++j) {
      const double a = targets[n][j];
      if (a == 0.0) continue;
      const double s = static_cast<double>(probs.at2(n, j));
      const double clamped = std::max(s, kLogEps);
      total += a * (std::log(a) - std::log(clamped));
      if (dprobs && s > kLogEps) dprobs->at2(n, j) = static_cast<T>(-a / clamped * inv_b);
    }
  return total * inv_b;
}

// -sum_i S_i ln T_i per sample, averaged over the batch. Gradients flow into
// the student probabilities only; the teacher side is a constant.
template <typename T>
double loss_consistency(const Tensor<T>& student_probs, const Tensor<T>& teacher_probs,
                        Tensor<T>* dstudent = nullptr) {
  if (!student_probs.same_shape(teacher_probs))
    raise(Errc::ShapeMismatch, "student/teacher probability shapes differ");
  const std::size_t batch = student_probs.dim(0), k = student_probs.dim(1);
  if (dstudent) *dstudent = Tensor<T>::zeros(student_probs.shape);
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < k; ++j) {
      const double t = std::max(static_cast<double>(teacher_probs.at2(n, j)), kLogEps);
      const double log_t = std::log(t);
      total -= static_cast<double>(student_probs.at2(n, j)) * log_t;
      if (dstudent) dstudent->at2(n, j) = static_cast<T>(-log_t * inv_b);
    }
  return total * inv_b;
}

// dL/dS -> dL/dlogits through the softmax Jacobian.
template <typename T>
Tensor<T> chain_softmax(const Tensor<T>& probs, const Tensor<T>& dprobs) {
  if (!probs.same_shape(dprobs)) raise(Errc::ShapeMismatch, "probs/dprobs shapes differ");
  Tensor<T> dlogits = Tensor<T>::zeros(probs.shape);
  const std::size_t batch = probs.dim(0), k = probs.dim(1);
  for (std::size_t n = 0; n < batch; ++n) {
    double dot = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      dot += static_cast<double>(dprobs.at2(n, j)) * static_cast<double>(probs.at2(n, j));
    for (std::size_t j = 0; j < k; ++j)
      dlogits.at2(n, j) = static_cast<T>(static_cast<double>(probs.at2(n, j)) *
                                         (static_cast<double>(dprobs.at2(n, j)) - dot));
  }
  return dlogits;
}

// Plain SGD; consumes the accumulated gradients.
template <typename T>
void sgd_step(ParameterSet<T>& params, double lr) {
  if (!params.has_grads) raise(Errc::MissingGradients, "sgd_step before any backward pass");
  for (Param<T>& p : params.params)
    for (std::size_t i = 0; i < p.value.size(); ++i)
      p.value[i] -= static_cast<T>(lr * static_cast<double>(p.grad[i]));
  params.zero_grads();
}

struct GradCheckReport {
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Central-difference audit of the analytic gradient of the supervised loss.
// mutate_param/mutate_scale deliberately corrupt one analytic gradient before
// the comparison, to confirm the check itself can catch a planted bug.
template <typename T>
GradCheckReport finite_diff_check(const EncoderConfig& cfg, const ParameterSet<T>& start,
                                  const Tensor<T>& input,
                                  const std::vector<std::array<double, kActiveClassCount>>& targets,
                                  std::size_t samples, Rng& rng, double eps = 1e-5,
                                  const std::string& mutate_param = std::string(),
                                  double mutate_scale = 1.0) {
  ParameterSet<T> params = start;
  params.zero_grads();
  ForwardTrace<T> trace = forward_batch(cfg, params, input);
  Tensor<T> probs = softmax_batch(trace.logits);
  Tensor<T> dprobs;
  loss_supervised(probs, targets, &dprobs);
  backward_batch(cfg, params, trace, chain_softmax(probs, dprobs));
  if (!mutate_param.empty()) {
    Param<T>& p = params.find(mutate_param);
    for (T& g : p.grad) g = static_cast<T>(static_cast<double>(g) * mutate_scale);
  }

  auto loss_at = [&](const ParameterSet<T>& ps) {
    ForwardTrace<T> t = forward_batch(cfg, ps, input);
    return loss_supervised(softmax_batch(t.logits), targets);
  };

  // (param index, flat index) pairs, sampled without replacement. A mutated
  // parameter's coordinates are moved to the front so the audit always covers
  // the block it was told to corrupt — a sparse sample could otherwise skip
  // it entirely and report a clean bill.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.params.size(); ++pi)
    for (std::size_t i = 0; i < params.params[pi].value.size(); ++i) coords.emplace_back(pi, i);
  rng.shuffle(coords);
  if (!mutate_param.empty()) {
    const auto is_mutated = [&](const std::pair<std::size_t, std::size_t>& c) {
      return params.params[c.first].name == mutate_param;
    };
    std::stable_partition(coords.begin(), coords.end(), is_mutated);
  }
  const std::size_t n_check = std::min(samples, coords.size());

  GradCheckReport report;
  ParameterSet<T> probe = params;
  for (std::size_t c = 0; c < n_check; ++c) {
    const auto [pi, i] = coords[c];
    const T saved = probe.params[pi].value[i];
    probe.params[pi].value[i] = static_cast<T>(static_cast<double>(saved) + eps);
    const double plus = loss_at(probe);
    probe.params[pi].value[i] = static_cast<T>(static_cast<double>(saved) - eps);
    const double minus = loss_at(probe);
    probe.params[pi].value[i] = saved;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double analytic = static_cast<double>(params.params[pi].grad[i]);
    const double rel =
        std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)});
    ++report.checked;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = params.params[pi].name;
      report.worst_index = i;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
  }
  return report;
}

namespace detail {

template <typename T>
const char* precision_tag() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

inline std::filesystem::path strip_ck_ext(const std::filesystem::path& path) {
  std::string s = path.string();
  for (const char* ext : {".ck.json", ".ck.blob"}) {
    const std::string e(ext);
    if (s.size() > e.size() && s.compare(s.size() - e.size(), e.size(), e) == 0)
      return std::filesystem::path(s.substr(0, s.size() - e.size()));
  }
  return path;
}

}  // namespace detail

// Checkpoint container: <base>.ck.json header plus <base>.ck.blob with the
// little-endian parameter values in header order.
template <typename T>
void save_checkpoint(const std::filesystem::path& base_path, const EncoderConfig& cfg,
                     const ParameterSet<T>& params,
                     const nlohmann::ordered_json& meta = nlohmann::ordered_json::object()) {
  const std::filesystem::path base = detail::strip_ck_ext(base_path);
  nlohmann::ordered_json header;
  header["format"] = "geokr-checkpoint";
  header["version"] = 1;
  header["precision"] = detail::precision_tag<T>();
  header["encoder"] = cfg.to_json();
  nlohmann::ordered_json plist = nlohmann::ordered_json::array();
  std::size_t total = 0;
  for (const Param<T>& p : params.params) {
    plist.push_back({{"name", p.name}, {"shape", p.shape}});
    total += p.value.size();
  }
  header["params"] = std::move(plist);
  header["value_count"] = total;
  if (!meta.empty()) header["meta"] = meta;

  std::ofstream hout(base.string() + ".ck.json", std::ios::trunc);
  if (!hout) raise(Errc::SourceUnreadable, "cannot write checkpoint header: " + base.string());
  hout << header.dump(2) << '\n';

  std::ofstream bout(base.string() + ".ck.blob", std::ios::binary | std::ios::trunc);
  if (!bout) raise(Errc::SourceUnreadable, "cannot write checkpoint blob: " + base.string());
  for (const Param<T>& p : params.params)
    bout.write(reinterpret_cast<const char*>(p.value.data()),
               static_cast<std::streamsize>(p.value.size() * sizeof(T)));
}

template <typename T>
struct Checkpoint {
  EncoderConfig encoder;
  ParameterSet<T> params;
  nlohmann::ordered_json meta;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& base_path) {
  const std::filesystem::path base = detail::strip_ck_ext(base_path);
  std::ifstream hin(base.string() + ".ck.json");
  if (!hin) raise(Errc::SourceUnreadable, "cannot open checkpoint header: " + base.string());
  nlohmann::json header;
  try {
    hin >> header;
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::MalformedHeader, std::string("checkpoint header: ") + e.what());
  }
  Checkpoint<T> ck;
  std::size_t total = 0;
  try {
    if (header.at("format").get<std::string>() != "geokr-checkpoint")
      raise(Errc::MalformedHeader, "not a checkpoint header");
    const std::string tag = header.at("precision").get<std::string>();
    if (tag != detail::precision_tag<T>())
      raise(Errc::ArchitectureMismatch,
            "checkpoint precision " + tag + ", requested " + detail::precision_tag<T>());
    ck.encoder = EncoderConfig::from_json(header.at("encoder"));
    for (const auto& pj : header.at("params")) {
      Param<T> p;
      p.name = pj.at("name").get<std::string>();
      p.shape = pj.at("shape").get<std::vector<std::size_t>>();
      std::size_t n = 1;
      for (std::size_t d : p.shape) n *= d;
      p.value.assign(n, T{0});
      p.grad.assign(n, T{0});
      total += n;
      ck.params.params.push_back(std::move(p));
    }
    if (header.at("value_count").get<std::size_t>() != total)
      raise(Errc::SizeMismatch, "checkpoint value_count does not match parameter shapes");
    if (header.contains("meta")) ck.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::MalformedHeader, std::string("checkpoint header: ") + e.what());
  }

  std::ifstream bin(base.string() + ".ck.blob", std::ios::binary);
  if (!bin) raise(Errc::SourceUnreadable, "cannot open checkpoint blob: " + base.string());
  bin.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  if (bytes != total * sizeof(T))
    raise(Errc::SizeMismatch, "checkpoint blob has " + std::to_string(bytes) + " bytes, expected " +
                                  std::to_string(total * sizeof(T)));
  bin.seekg(0);
  for (Param<T>& p : ck.params.params)
    bin.read(reinterpret_cast<char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(T)));
  if (!bin) raise(Errc::SourceUnreadable, "short read on checkpoint blob");
  return ck;
}

}  // namespace geokr
