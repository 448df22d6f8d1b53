#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "geokr/error.hpp"
#include "geokr/geoknow.hpp"
#include "geokr/ingest.hpp"
#include "geokr/nnet.hpp"
#include "geokr/rng.hpp"
#include "geokr/tensor.hpp"
#include "geokr/trainer.hpp"

namespace geokr {

using ClassVector = std::array<double, kActiveClassCount>;

// Mean knowledge representation over a manifest: the per-class share of the
// covered product.
inline ClassVector mean_proportions(const std::vector<TileRecord>& records) {
  if (records.empty()) throw std::invalid_argument("mean_proportions of empty manifest");
  ClassVector mean{};
  for (const TileRecord& r : records)
    for (std::size_t c = 0; c < kActiveClassCount; ++c) mean[c] += r.representation.proportions[c];
  for (double& v : mean) v /= static_cast<double>(records.size());
  return mean;
}

struct ChangeReport {
  ClassVector old_proportions{};
  ClassVector new_proportions{};
  ClassVector mae{};   // |new - old|
  ClassVector mape{};  // |new - old| / old

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < kActiveClassCount; ++c) {
      nlohmann::ordered_json row;
      row["index"] = c;
      row["name"] = kActiveClassNames[c];
      row["old"] = old_proportions[c];
      row["new"] = new_proportions[c];
      row["mae"] = mae[c];
      row["mape"] = mape[c];
      rows.push_back(std::move(row));
    }
    nlohmann::ordered_json j;
    j["classes"] = std::move(rows);
    return j;
  }

  std::string format_table() const {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-22s %10s %10s %10s %10s\n", "class", "old", "new", "mae",
                  "mape");
    out += line;
    for (std::size_t c = 0; c < kActiveClassCount; ++c) {
      std::snprintf(line, sizeof line, "%-22s %10.4f %10.4f %10.4f %10.4f\n", kActiveClassNames[c],
                    old_proportions[c], new_proportions[c], mae[c], mape[c]);
      out += line;
    }
    return out;
  }
};

// Per-class absolute and relative change between two epochs of the product.
// The relative error is taken against the older epoch.
inline ChangeReport product_change_stats(const ClassVector& old_proportions,
                                         const ClassVector& new_proportions) {
  ChangeReport report;
  report.old_proportions = old_proportions;
  report.new_proportions = new_proportions;
  for (std::size_t c = 0; c < kActiveClassCount; ++c) {
    report.mae[c] = std::abs(new_proportions[c] - old_proportions[c]);
    if (old_proportions[c] == 0.0)
      raise(Errc::DivisionByZeroProportion, "class " + std::string(kActiveClassNames[c]) +
                                                " has zero share in the reference epoch");
    report.mape[c] = report.mae[c] / old_proportions[c];
  }
  return report;
}

// Fraction of matched tiles whose dominant class changed. The two manifests
// must describe the same tiling.
inline double category_change_rate(const std::vector<TileRecord>& a,
                                   const std::vector<TileRecord>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("category_change_rate of empty manifest");
  using Key = std::tuple<std::string, std::size_t, std::size_t>;
  std::map<Key, int> labels_b;
  for (const TileRecord& r : b) labels_b[{r.scene_id, r.tile_row, r.tile_col}] = r.label;
  if (labels_b.size() != b.size())
    raise(Errc::KeyMismatch, "duplicate tile keys in second manifest");
  if (a.size() != b.size())
    raise(Errc::KeyMismatch, "manifests cover " + std::to_string(a.size()) + " vs " +
                                 std::to_string(b.size()) + " tiles");
  std::int64_t changed = 0;
  for (const TileRecord& r : a) {
    const auto it = labels_b.find({r.scene_id, r.tile_row, r.tile_col});
    if (it == labels_b.end())
      raise(Errc::KeyMismatch, "tile " + r.scene_id + "[" + std::to_string(r.tile_row) + "," +
                                   std::to_string(r.tile_col) + "] missing from second manifest");
    if (it->second != r.label) ++changed;
  }
  return static_cast<double>(changed) / static_cast<double>(a.size());
}

// ---- linear probe on frozen features ----

struct ProbeConfig {
  std::size_t seeds = 3;
  std::uint64_t base_seed = 99;
  double lr = 1e-2;
  std::size_t epochs = 200;
  std::size_t batch = 64;
  double holdout = 0.25;

  void validate() const {
    if (seeds == 0) raise(Errc::InvalidConfig, "probe needs at least one seed");
    if (lr <= 0.0 || epochs == 0 || batch == 0) raise(Errc::InvalidConfig, "bad probe optimizer settings");
    if (!(holdout > 0.0 && holdout < 1.0)) raise(Errc::InvalidConfig, "holdout must be in (0, 1)");
  }
};

struct ProbeResult {
  std::vector<double> per_seed;
  double mean_accuracy = 0.0;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
  std::size_t feature_dim = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["mean_accuracy"] = mean_accuracy;
    j["per_seed"] = per_seed;
    j["n_train"] = n_train;
    j["n_eval"] = n_eval;
    j["feature_dim"] = feature_dim;
    return j;
  }
};

// Pooled encoder outputs for every tile, computed once with frozen weights.
template <typename T>
Tensor<double> encode_features(const EncoderConfig& cfg, const ParameterSet<T>& params,
                               const TrainingSet<T>& set, std::size_t batch = 64) {
  if (set.size() == 0) throw std::invalid_argument("encode_features of empty set");
  const std::size_t d = cfg.representation_dim();
  Tensor<double> features = Tensor<double>::zeros({set.size(), d});
  const std::size_t plane = set.channels * set.tile_size * set.tile_size;
  for (std::size_t start = 0; start < set.size(); start += batch) {
    const std::size_t n = std::min(batch, set.size() - start);
    Tensor<T> chunk = Tensor<T>::zeros({n, set.channels, set.tile_size, set.tile_size});
    for (std::size_t i = 0; i < n; ++i)
      std::copy(set.tiles[start + i].data.begin(), set.tiles[start + i].data.end(),
                chunk.data.begin() + static_cast<std::ptrdiff_t>(i * plane));
    const ForwardTrace<T> trace = forward_batch(cfg, params, chunk);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c)
        features.at2(start + i, c) = static_cast<double>(trace.pooled.at2(i, c));
  }
  return features;
}

namespace detail {

// Softmax regression by minibatch SGD; returns holdout accuracy.
inline double probe_one_seed(const Tensor<double>& features, const std::vector<int>& labels,
                             const ProbeConfig& cfg, std::uint64_t seed) {
  const std::size_t n = features.dim(0), d = features.dim(1);
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  const std::size_t n_eval = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.holdout * static_cast<double>(n))));
  if (n_eval >= n) raise(Errc::InvalidConfig, "holdout leaves no training samples");
  const std::vector<std::size_t> eval_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_eval), order.end());

  // Standardize each feature column with train-split statistics so the probe's
  // conditioning does not depend on the encoder's arbitrary output scale.
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (const std::size_t idx : train_idx)
    for (std::size_t c = 0; c < d; ++c) mu[c] += features.data[idx * d + c];
  for (std::size_t c = 0; c < d; ++c) mu[c] /= static_cast<double>(train_idx.size());
  for (const std::size_t idx : train_idx)
    for (std::size_t c = 0; c < d; ++c) {
      const double dev = features.data[idx * d + c] - mu[c];
      sd[c] += dev * dev;
    }
  for (std::size_t c = 0; c < d; ++c)
    sd[c] = std::max(std::sqrt(sd[c] / static_cast<double>(train_idx.size())), 1e-8);
  std::vector<double> scaled(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) scaled[i * d + c] = (features.data[i * d + c] - mu[c]) / sd[c];

  std::vector<double> w(kActiveClassCount * d, 0.0);
  std::vector<double> b(kActiveClassCount, 0.0);
  std::vector<double> logits(kActiveClassCount);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(train_idx);
    for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch) {
      const std::size_t m = std::min(cfg.batch, train_idx.size() - start);
      std::vector<double> dw(kActiveClassCount * d, 0.0);
      std::vector<double> db(kActiveClassCount, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t idx = train_idx[start + i];
        const double* f = &scaled[idx * d];
        double peak = -1e300;
        for (std::size_t k = 0; k < kActiveClassCount; ++k) {
          logits[k] = b[k];
          for (std::size_t c = 0; c < d; ++c) logits[k] += w[k * d + c] * f[c];
          peak = std::max(peak, logits[k]);
        }
        double total = 0.0;
        for (std::size_t k = 0; k < kActiveClassCount; ++k) {
          logits[k] = std::exp(logits[k] - peak);
          total += logits[k];
        }
        for (std::size_t k = 0; k < kActiveClassCount; ++k) {
          const double g = logits[k] / total - (static_cast<int>(k) == labels[idx] ? 1.0 : 0.0);
          db[k] += g;
          for (std::size_t c = 0; c < d; ++c) dw[k * d + c] += g * f[c];
        }
      }
      const double scale = cfg.lr / static_cast<double>(m);
      for (std::size_t k = 0; k < kActiveClassCount * d; ++k) w[k] -= scale * dw[k];
      for (std::size_t k = 0; k < kActiveClassCount; ++k) b[k] -= scale * db[k];
    }
  }

  std::int64_t hits = 0;
  for (const std::size_t idx : eval_idx) {
    const double* f = &scaled[idx * d];
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t k = 0; k < kActiveClassCount; ++k) {
      double v = b[k];
      for (std::size_t c = 0; c < d; ++c) v += w[k * d + c] * f[c];
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    if (static_cast<int>(best) == labels[idx]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n_eval);
}

}  // namespace detail

// Trains a linear classifier on frozen pooled features and reports holdout
// accuracy averaged over several split seeds. Labels come from the set, not
// from the encoder.
template <typename T>
ProbeResult linear_probe(const EncoderConfig& cfg, const ParameterSet<T>& params,
                         const TrainingSet<T>& set, const ProbeConfig& pcfg) {
  pcfg.validate();
  const Tensor<double> features = encode_features(cfg, params, set);
  ProbeResult result;
  result.feature_dim = cfg.representation_dim();
  const std::size_t n = set.size();
  result.n_eval = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(pcfg.holdout * static_cast<double>(n))));
  result.n_train = n - result.n_eval;
  for (std::size_t k = 0; k < pcfg.seeds; ++k)
    result.per_seed.push_back(detail::probe_one_seed(features, set.labels, pcfg, pcfg.base_seed + k));
  for (const double a : result.per_seed) result.mean_accuracy += a;
  result.mean_accuracy /= static_cast<double>(result.per_seed.size());
  return result;
}

}  // namespace geokr
