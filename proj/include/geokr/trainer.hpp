#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "geokr/error.hpp"
#include "geokr/ingest.hpp"
#include "geokr/nnet.hpp"
#include "geokr/raster.hpp"
#include "geokr/rng.hpp"
#include "geokr/tensor.hpp"

namespace geokr {

enum class TrainMode { Classification, Representation, MeanTeacher };
enum class ExportRole { Student, Teacher };
enum class Precision { F32, F64 };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Classification: return "classification";
    case TrainMode::Representation: return "representation";
    case TrainMode::MeanTeacher: return "mean_teacher";
  }
  return "?";
}

inline TrainMode train_mode_from(const std::string& s) {
  if (s == "classification") return TrainMode::Classification;
  if (s == "representation") return TrainMode::Representation;
  if (s == "mean_teacher") return TrainMode::MeanTeacher;
  raise(Errc::InvalidConfig, "unknown training mode: " + s);
}

inline const char* export_role_name(ExportRole r) {
  return r == ExportRole::Student ? "student" : "teacher";
}

inline ExportRole export_role_from(const std::string& s) {
  if (s == "student") return ExportRole::Student;
  if (s == "teacher") return ExportRole::Teacher;
  raise(Errc::InvalidConfig, "unknown export role: " + s);
}

inline const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

inline Precision precision_from(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  raise(Errc::InvalidConfig, "unknown precision: " + s);
}

struct TrainConfig {
  TrainMode mode = TrainMode::MeanTeacher;
  double lr = 1e-3;
  double lr_decay = 0.9;       // lr_e = lr * decay^e
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double ema_alpha = 0.95;
  std::size_t ema_interval = 50;  // steps between teacher updates, 0 = never
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  ExportRole export_role = ExportRole::Teacher;
  Precision precision = Precision::F32;
  std::uint64_t seed = 1234;
  bool augment = true;
  double noise_std = 0.05;     // additive noise in normalized pixel units
  std::vector<ConvStage> stages = {{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};

  void validate() const {
    if (lr <= 0.0) raise(Errc::InvalidConfig, "lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) raise(Errc::InvalidConfig, "lr_decay must be in (0, 1]");
    if (epochs == 0) raise(Errc::InvalidConfig, "epochs must be positive");
    if (batch_size == 0) raise(Errc::InvalidConfig, "batch_size must be positive");
    if (!(ema_alpha >= 0.0 && ema_alpha <= 1.0)) raise(Errc::InvalidConfig, "ema_alpha must be in [0, 1]");
    if (gamma1 < 0.0 || gamma2 < 0.0) raise(Errc::InvalidConfig, "loss weights must be non-negative");
    if (noise_std < 0.0) raise(Errc::InvalidConfig, "noise_std must be non-negative");
    if (stages.empty()) raise(Errc::InvalidConfig, "at least one conv stage required");
  }

  // the teacher only exists under mean_teacher; other modes export the student
  ExportRole effective_export_role() const {
    return mode == TrainMode::MeanTeacher ? export_role : ExportRole::Student;
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    if (j.contains("mode")) cfg.mode = train_mode_from(j.at("mode").get<std::string>());
    if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
    if (j.contains("lr_decay")) cfg.lr_decay = j.at("lr_decay").get<double>();
    if (j.contains("epochs")) cfg.epochs = j.at("epochs").get<std::size_t>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("ema_alpha")) cfg.ema_alpha = j.at("ema_alpha").get<double>();
    if (j.contains("ema_interval")) cfg.ema_interval = j.at("ema_interval").get<std::size_t>();
    if (j.contains("gamma1")) cfg.gamma1 = j.at("gamma1").get<double>();
    if (j.contains("gamma2")) cfg.gamma2 = j.at("gamma2").get<double>();
    if (j.contains("export")) cfg.export_role = export_role_from(j.at("export").get<std::string>());
    if (j.contains("precision")) cfg.precision = precision_from(j.at("precision").get<std::string>());
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("augment")) cfg.augment = j.at("augment").get<bool>();
    if (j.contains("noise_std")) cfg.noise_std = j.at("noise_std").get<double>();
    if (j.contains("stages")) {
      cfg.stages.clear();
      for (const auto& s : j.at("stages")) {
        ConvStage st;
        st.out_channels = s.at("out_channels").get<std::size_t>();
        st.kernel = s.at("kernel").get<std::size_t>();
        st.stride = s.at("stride").get<std::size_t>();
        cfg.stages.push_back(st);
      }
    }
    cfg.validate();
    return cfg;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = train_mode_name(mode);
    j["lr"] = lr;
    j["lr_decay"] = lr_decay;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["ema_alpha"] = ema_alpha;
    j["ema_interval"] = ema_interval;
    j["gamma1"] = gamma1;
    j["gamma2"] = gamma2;
    j["export"] = export_role_name(export_role);
    j["precision"] = precision_name(precision);
    j["seed"] = seed;
    j["augment"] = augment;
    j["noise_std"] = noise_std;
    nlohmann::ordered_json st = nlohmann::ordered_json::array();
    for (const ConvStage& s : stages)
      st.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}});
    j["stages"] = std::move(st);
    return j;
  }
};

// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, elementwise.
template <typename T>
void ema_update(ParameterSet<T>& teacher, const ParameterSet<T>& student, double alpha) {
  if (teacher.params.size() != student.params.size())
    raise(Errc::ArchitectureMismatch, "teacher/student parameter counts differ");
  for (std::size_t i = 0; i < teacher.params.size(); ++i) {
    Param<T>& t = teacher.params[i];
    const Param<T>& s = student.params[i];
    if (t.name != s.name || t.value.size() != s.value.size())
      raise(Errc::ArchitectureMismatch, "teacher/student parameter " + t.name + " differs");
    for (std::size_t j = 0; j < t.value.size(); ++j)
      t.value[j] = static_cast<T>(alpha * static_cast<double>(t.value[j]) +
                                  (1.0 - alpha) * static_cast<double>(s.value[j]));
  }
}

struct AugmentParams {
  int rot90 = 0;       // quarter turns, counter-clockwise
  bool flip_h = false; // mirror columns, applied after rotation
  std::uint64_t noise_seed = 0;
};

// Fixed number of generator draws regardless of outcome, so the stream stays
// aligned across modes.
inline AugmentParams draw_augment_params(Rng& rng) {
  AugmentParams p;
  p.rot90 = static_cast<int>(rng.uniform_int(0, 3));
  p.flip_h = rng.bernoulli(0.5);
  p.noise_seed = rng.next_u64();
  return p;
}

// In-place view transform of sample n of a BxCxHxW batch.
template <typename T>
void augment_tile(Tensor<T>& batch, std::size_t n, const AugmentParams& p, double noise_std) {
  const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (p.rot90 % 4 != 0 && h != w)
    raise(Errc::NonSquareTile, "rotation requires square tiles, got " + std::to_string(h) + "x" +
                                   std::to_string(w));
  const std::size_t plane = h * w;
  std::vector<T> scratch(plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* base = &batch.data[(n * c + ch) * plane];
    for (int r = 0; r < p.rot90 % 4; ++r) {
      // (y, x) -> (h-1-x, y)
      std::copy(base, base + plane, scratch.begin());
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) base[(h - 1 - x) * w + y] = scratch[y * w + x];
    }
    if (p.flip_h)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w / 2; ++x) std::swap(base[y * w + x], base[y * w + (w - 1 - x)]);
  }
  if (noise_std > 0.0) {
    Rng noise(p.noise_seed);
    T* base = &batch.data[n * c * plane];
    for (std::size_t i = 0; i < c * plane; ++i) {
      double v = static_cast<double>(base[i]) + noise.normal(0.0, noise_std);
      base[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }
}

// Tiles decoded to normalized [0, 1] tensors, one per manifest row.
template <typename T>
struct TrainingSet {
  std::size_t tile_size = 0;
  std::size_t channels = 3;
  std::vector<Tensor<T>> tiles;
  std::vector<std::array<double, kActiveClassCount>> targets;
  std::vector<int> labels;
  std::vector<int> dup_factors;

  std::size_t size() const { return tiles.size(); }
};

template <typename T>
TrainingSet<T> load_training_set(const std::filesystem::path& manifest_path,
                                 const std::filesystem::path& scenes_dir, std::size_t tile_size) {
  if (tile_size == 0) raise(Errc::InvalidConfig, "tile_size must be positive");
  const std::vector<TileRecord> records = read_manifest(manifest_path);
  TrainingSet<T> set;
  set.tile_size = tile_size;
  std::map<std::string, RasterGrid> cache;
  for (const TileRecord& r : records) {
    auto it = cache.find(r.scene_id);
    if (it == cache.end())
      it = cache.emplace(r.scene_id, read_raster(scenes_dir / (r.scene_id + ".rhdr"))).first;
    const RasterGrid& scene = it->second;
    const RasterGrid tile = crop(scene, r.offset_col, r.offset_row, tile_size, tile_size);
    if (tile.bands != set.channels)
      raise(Errc::WrongBandCount, "training tiles must have 3 bands, got " + std::to_string(tile.bands));
    const double scale = 1.0 / sample_type_max(tile.sample_type);
    Tensor<T> t = Tensor<T>::zeros({1, set.channels, tile_size, tile_size});
    for (std::size_t i = 0; i < tile.values.size(); ++i)
      t.data[i] = static_cast<T>(tile.values[i] * scale);
    t.shape = {set.channels, tile_size, tile_size};
    set.tiles.push_back(std::move(t));
    set.targets.push_back(r.representation.proportions);
    set.labels.push_back(r.label);
    set.dup_factors.push_back(std::max(1, r.duplication_factor));
  }
  return set;
}

template <typename T>
struct TrainerState {
  EncoderConfig encoder;
  ParameterSet<T> student;
  ParameterSet<T> teacher;  // tracks the student only under mean_teacher
  std::uint64_t global_step = 0;
  Rng rng{0};
};

template <typename T>
TrainerState<T> init_trainer(const TrainConfig& cfg, std::size_t tile_size, std::size_t channels = 3) {
  cfg.validate();
  TrainerState<T> state;
  state.encoder.in_channels = channels;
  state.encoder.height = tile_size;
  state.encoder.width = tile_size;
  state.encoder.stages = cfg.stages;
  state.encoder.output_dim = kActiveClassCount;
  state.encoder.validate();
  state.rng = Rng(cfg.seed);
  state.student = init_parameters<T>(state.encoder, state.rng);
  if (cfg.mode == TrainMode::MeanTeacher) state.teacher = state.student;
  return state;
}

struct StepMetrics {
  double loss_s = 0.0;
  double loss_t = 0.0;
  double loss_total = 0.0;
};

namespace detail {

inline std::array<double, kActiveClassCount> one_hot(int label) {
  std::array<double, kActiveClassCount> a{};
  a[static_cast<std::size_t>(label)] = 1.0;
  return a;
}

}  // namespace detail

// One optimizer step over a pre-assembled batch. Augmentation draws happen
// here, per sample, student view first.
template <typename T>
StepMetrics train_step(const TrainConfig& cfg, TrainerState<T>& state, const Tensor<T>& batch,
                       const std::vector<std::array<double, kActiveClassCount>>& targets,
                       const std::vector<int>& labels, double lr) {
  const std::size_t b = batch.dim(0);
  if (targets.size() != b || labels.size() != b)
    raise(Errc::ShapeMismatch, "batch/target/label sizes differ");

  Tensor<T> student_view = batch;
  Tensor<T> teacher_view;
  const bool need_teacher = cfg.mode == TrainMode::MeanTeacher && cfg.gamma2 > 0.0;
  if (need_teacher) teacher_view = batch;
  if (cfg.augment) {
    for (std::size_t n = 0; n < b; ++n) {
      augment_tile(student_view, n, draw_augment_params(state.rng), cfg.noise_std);
      if (cfg.mode == TrainMode::MeanTeacher)
        if (AugmentParams p = draw_augment_params(state.rng); need_teacher)
          augment_tile(teacher_view, n, p, cfg.noise_std);
    }
  }

  ForwardTrace<T> trace = forward_batch(state.encoder, state.student, student_view);
  Tensor<T> probs = softmax_batch(trace.logits);

  StepMetrics metrics;
  Tensor<T> dprobs_total = Tensor<T>::zeros(probs.shape);
  if (cfg.mode == TrainMode::Classification) {
    std::vector<std::array<double, kActiveClassCount>> hard(b);
    for (std::size_t n = 0; n < b; ++n) hard[n] = detail::one_hot(labels[n]);
    Tensor<T> dprobs;
    metrics.loss_s = loss_supervised(probs, hard, &dprobs);
    for (std::size_t i = 0; i < dprobs_total.numel(); ++i)
      dprobs_total[i] += static_cast<T>(cfg.gamma1 * static_cast<double>(dprobs[i]));
  } else {
    Tensor<T> dprobs;
    metrics.loss_s = loss_supervised(probs, targets, &dprobs);
    for (std::size_t i = 0; i < dprobs_total.numel(); ++i)
      dprobs_total[i] += static_cast<T>(cfg.gamma1 * static_cast<double>(dprobs[i]));
  }
  if (need_teacher) {
    ForwardTrace<T> teacher_trace = forward_batch(state.encoder, state.teacher, teacher_view);
    Tensor<T> teacher_probs = softmax_batch(teacher_trace.logits);
    Tensor<T> dstudent;
    metrics.loss_t = loss_consistency(probs, teacher_probs, &dstudent);
    for (std::size_t i = 0; i < dprobs_total.numel(); ++i)
      dprobs_total[i] += static_cast<T>(cfg.gamma2 * static_cast<double>(dstudent[i]));
  }
  metrics.loss_total = cfg.gamma1 * metrics.loss_s + cfg.gamma2 * metrics.loss_t;
  if (!std::isfinite(metrics.loss_total))
    raise(Errc::NonFiniteLoss, "loss diverged at step " + std::to_string(state.global_step + 1));

  state.student.zero_grads();
  backward_batch(state.encoder, state.student, trace, chain_softmax(probs, dprobs_total));
  sgd_step(state.student, lr);
  ++state.global_step;
  if (cfg.mode == TrainMode::MeanTeacher && cfg.ema_interval > 0 &&
      state.global_step % cfg.ema_interval == 0)
    ema_update(state.teacher, state.student, cfg.ema_alpha);
  return metrics;
}

struct TrainSummary {
  std::uint64_t steps = 0;
  std::size_t epochs = 0;
  StepMetrics last;
  std::filesystem::path export_path;
};

// Full pre-training loop. Writes metrics.jsonl, per-epoch checkpoints and the
// final exported model into out_dir; every output is a pure function of the
// config and the training set.
template <typename T>
TrainSummary run_pretraining(const TrainConfig& cfg, const TrainingSet<T>& set,
                             const std::filesystem::path& out_dir) {
  cfg.validate();
  if (set.size() == 0) raise(Errc::InvalidConfig, "training set is empty");
  std::filesystem::create_directories(out_dir);
  TrainerState<T> state = init_trainer<T>(cfg, set.tile_size, set.channels);

  std::ofstream metrics_out(out_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics_out) raise(Errc::SourceUnreadable, "cannot write metrics log in " + out_dir.string());

  // class balancing realized as virtual duplication of the index list
  std::vector<std::size_t> virtual_indices;
  for (std::size_t i = 0; i < set.size(); ++i)
    for (int d = 0; d < set.dup_factors[i]; ++d) virtual_indices.push_back(i);

  TrainSummary summary;
  summary.epochs = cfg.epochs;
  const std::size_t plane = set.channels * set.tile_size * set.tile_size;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch));
    std::vector<std::size_t> order = virtual_indices;
    state.rng.shuffle(order);
    const std::size_t n_batches = order.size() / cfg.batch_size;  // drop ragged tail
    for (std::size_t bi = 0; bi < n_batches; ++bi) {
      Tensor<T> batch = Tensor<T>::zeros({cfg.batch_size, set.channels, set.tile_size, set.tile_size});
      std::vector<std::array<double, kActiveClassCount>> targets(cfg.batch_size);
      std::vector<int> labels(cfg.batch_size);
      for (std::size_t n = 0; n < cfg.batch_size; ++n) {
        const std::size_t idx = order[bi * cfg.batch_size + n];
        std::copy(set.tiles[idx].data.begin(), set.tiles[idx].data.end(),
                  batch.data.begin() + static_cast<std::ptrdiff_t>(n * plane));
        targets[n] = set.targets[idx];
        labels[n] = set.labels[idx];
      }
      const StepMetrics m = train_step(cfg, state, batch, targets, labels, lr);
      summary.last = m;
      nlohmann::ordered_json line;
      line["step"] = state.global_step;
      line["epoch"] = epoch;
      line["lr"] = lr;
      line["loss_s"] = m.loss_s;
      line["loss_t"] = m.loss_t;
      line["loss_total"] = m.loss_total;
      metrics_out << line.dump() << '\n';
    }
    nlohmann::ordered_json meta;
    meta["mode"] = train_mode_name(cfg.mode);
    meta["epoch"] = epoch;
    meta["step"] = state.global_step;
    meta["seed"] = cfg.seed;
    meta["role"] = "student";
    save_checkpoint(out_dir / ("epoch_" + std::to_string(epoch) + ".student"), state.encoder,
                    state.student, meta);
    if (cfg.mode == TrainMode::MeanTeacher) {
      meta["role"] = "teacher";
      save_checkpoint(out_dir / ("epoch_" + std::to_string(epoch) + ".teacher"), state.encoder,
                      state.teacher, meta);
    }
  }
  summary.steps = state.global_step;

  const ExportRole role = cfg.effective_export_role();
  nlohmann::ordered_json meta;
  meta["mode"] = train_mode_name(cfg.mode);
  meta["epoch"] = cfg.epochs;
  meta["step"] = state.global_step;
  meta["seed"] = cfg.seed;
  meta["role"] = export_role_name(role);
  const ParameterSet<T>& exported = role == ExportRole::Teacher ? state.teacher : state.student;
  save_checkpoint(out_dir / "model", state.encoder, exported, meta);
  summary.export_path = out_dir / "model.ck.json";
  return summary;
}

}  // namespace geokr
