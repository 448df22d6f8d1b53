#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "geokr/error.hpp"
#include "geokr/geoknow.hpp"
#include "geokr/raster.hpp"

namespace geokr {

struct IngestConfig {
  std::size_t tile_size = 256;
  double overlap_rate = 0.2;
  std::uint16_t cloud_threshold = 230;   // t
  double cloud_discard_ratio = 0.5;      // discard iff r_c > this
  double contrast_lower_percentile = 1.0;
  double contrast_upper_percentile = 99.0;
  double contrast_fraction_threshold = 0.05;
  int max_duplication_factor = 50;       // 0 = uncapped

  void validate() const {
    if (tile_size == 0) raise(Errc::InvalidConfig, "tile_size must be positive");
    if (!(overlap_rate >= 0.0 && overlap_rate < 1.0))
      raise(Errc::InvalidConfig, "overlap_rate must be in [0, 1)");
    if (!(cloud_discard_ratio > 0.0 && cloud_discard_ratio <= 1.0))
      raise(Errc::InvalidConfig, "cloud_discard_ratio must be in (0, 1]");
    if (max_duplication_factor < 0) raise(Errc::InvalidConfig, "max_duplication_factor must be >= 0");
  }

  static IngestConfig from_json(const nlohmann::json& j) {
    IngestConfig cfg;
    if (j.contains("tile_size")) cfg.tile_size = j.at("tile_size").get<std::size_t>();
    if (j.contains("overlap_rate")) cfg.overlap_rate = j.at("overlap_rate").get<double>();
    if (j.contains("cloud_threshold")) cfg.cloud_threshold = j.at("cloud_threshold").get<std::uint16_t>();
    if (j.contains("cloud_discard_ratio")) cfg.cloud_discard_ratio = j.at("cloud_discard_ratio").get<double>();
    if (j.contains("contrast_percentiles")) {
      cfg.contrast_lower_percentile = j.at("contrast_percentiles").at(0).get<double>();
      cfg.contrast_upper_percentile = j.at("contrast_percentiles").at(1).get<double>();
    }
    if (j.contains("contrast_fraction_threshold"))
      cfg.contrast_fraction_threshold = j.at("contrast_fraction_threshold").get<double>();
    if (j.contains("max_duplication_factor"))
      cfg.max_duplication_factor = j.at("max_duplication_factor").get<int>();
    cfg.validate();
    return cfg;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tile_size"] = tile_size;
    j["overlap_rate"] = overlap_rate;
    j["cloud_threshold"] = cloud_threshold;
    j["cloud_discard_ratio"] = cloud_discard_ratio;
    j["contrast_percentiles"] = {contrast_lower_percentile, contrast_upper_percentile};
    j["contrast_fraction_threshold"] = contrast_fraction_threshold;
    j["max_duplication_factor"] = max_duplication_factor;
    return j;
  }
};

struct TilePlacement {
  std::size_t tile_row = 0;
  std::size_t tile_col = 0;
  std::size_t offset_col = 0;
  std::size_t offset_row = 0;
  GeoTransform geotransform;
};

namespace detail {

// Stride positions plus an edge-clamped final one so the far edge is covered.
inline std::vector<std::size_t> stride_positions(std::size_t extent, std::size_t tile,
                                                 std::size_t stride) {
  std::vector<std::size_t> positions;
  for (std::size_t p = 0; p + tile <= extent; p += stride) positions.push_back(p);
  if (positions.empty() || positions.back() + tile < extent) positions.push_back(extent - tile);
  return positions;
}

}  // namespace detail

// Row-major tile grid over the scene with stride floor(tile * (1 - overlap)).
inline std::vector<TilePlacement> tile_scene(const RasterGrid& scene, const IngestConfig& cfg) {
  cfg.validate();
  if (scene.width < cfg.tile_size || scene.height < cfg.tile_size)
    raise(Errc::SceneTooSmall, std::to_string(scene.width) + "x" + std::to_string(scene.height) +
                                   " scene cannot host " + std::to_string(cfg.tile_size) + "px tiles");
  const std::size_t stride = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::floor(static_cast<double>(cfg.tile_size) * (1.0 - cfg.overlap_rate))));
  const std::vector<std::size_t> cols = detail::stride_positions(scene.width, cfg.tile_size, stride);
  const std::vector<std::size_t> rows = detail::stride_positions(scene.height, cfg.tile_size, stride);
  std::vector<TilePlacement> tiles;
  tiles.reserve(cols.size() * rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      TilePlacement t;
      t.tile_row = r;
      t.tile_col = c;
      t.offset_col = cols[c];
      t.offset_row = rows[r];
      t.geotransform = scene.geotransform;
      const GeoPoint origin = forward_map(scene.geotransform, static_cast<double>(cols[c]),
                                          static_cast<double>(rows[r]));
      t.geotransform.origin_x = origin.x;
      t.geotransform.origin_y = origin.y;
      tiles.push_back(t);
    }
  }
  return tiles;
}

// r_c: fraction of pixels whose darkest channel still exceeds t. Clouds are
// bright in every band, so the min-across-channels reduction is used.
inline double cloud_ratio(const RasterGrid& tile, std::uint16_t threshold) {
  if (tile.bands != 3)
    raise(Errc::WrongBandCount, "cloud_ratio expects 3 bands, got " + std::to_string(tile.bands));
  const std::size_t n = tile.width * tile.height;
  std::int64_t cloudy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint16_t lowest = tile.values[i];
    for (std::size_t b = 1; b < 3; ++b)
      lowest = std::min(lowest, tile.values[b * n + i]);
    if (lowest > threshold) ++cloudy;
  }
  return static_cast<double>(cloudy) / static_cast<double>(n);
}

namespace detail {

// Linearly interpolated percentile of a sorted sample (numpy convention).
inline double percentile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("percentile of empty sample");
  const double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(rank));
  if (lo == hi) return sorted[lo];
  const double frac = rank - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace detail

// Percentile spread of the luminance (channel mean) relative to the sample
// type's full range.
inline bool is_low_contrast(const RasterGrid& tile, const IngestConfig& cfg) {
  if (tile.sample_count() == 0) throw std::invalid_argument("is_low_contrast: empty tile");
  const std::size_t n = tile.width * tile.height;
  std::vector<double> luminance(n, 0.0);
  for (std::size_t b = 0; b < tile.bands; ++b)
    for (std::size_t i = 0; i < n; ++i) luminance[i] += tile.values[b * n + i];
  for (double& v : luminance) v /= static_cast<double>(tile.bands);
  std::sort(luminance.begin(), luminance.end());
  const double lo = detail::percentile_sorted(luminance, cfg.contrast_lower_percentile);
  const double hi = detail::percentile_sorted(luminance, cfg.contrast_upper_percentile);
  const double spread = (hi - lo) / sample_type_range(tile.sample_type);
  return spread < cfg.contrast_fraction_threshold;
}

// One manifest row. Kept records satisfy the cloud and contrast filters.
struct TileRecord {
  std::string scene_id;
  std::size_t tile_row = 0;
  std::size_t tile_col = 0;
  std::size_t offset_col = 0;
  std::size_t offset_row = 0;
  GeoTransform geotransform;
  KnowledgeRepresentation representation;
  int label = 0;
  double cloud_ratio = 0.0;
  bool low_contrast = false;
  int duplication_factor = 1;
};

// Annotates per-class duplication factors; the list is not expanded here, the
// trainer realizes factors at sampling time.
inline void balance_classes(std::vector<TileRecord>& records, int max_duplication_factor = 50) {
  std::array<std::int64_t, kActiveClassCount> counts{};
  for (const TileRecord& r : records) ++counts[static_cast<std::size_t>(r.label)];
  const std::int64_t max_count = *std::max_element(counts.begin(), counts.end());
  std::array<int, kActiveClassCount> factors{};
  for (int c = 0; c < kActiveClassCount; ++c) {
    const std::int64_t n = counts[static_cast<std::size_t>(c)];
    if (n <= 0) {
      factors[static_cast<std::size_t>(c)] = 1;
      continue;
    }
    std::int64_t f = std::llround(static_cast<double>(max_count) / static_cast<double>(n));
    f = std::max<std::int64_t>(1, f);
    if (max_duplication_factor > 0) f = std::min<std::int64_t>(f, max_duplication_factor);
    factors[static_cast<std::size_t>(c)] = static_cast<int>(f);
  }
  for (TileRecord& r : records) r.duplication_factor = factors[static_cast<std::size_t>(r.label)];
}

inline nlohmann::ordered_json tile_record_to_json(const TileRecord& r) {
  nlohmann::ordered_json j;
  j["scene_id"] = r.scene_id;
  j["tile_row"] = r.tile_row;
  j["tile_col"] = r.tile_col;
  j["offset"] = {r.offset_col, r.offset_row};
  j["geotransform"] = r.geotransform.to_array();
  j["representation"] = r.representation.proportions;
  j["label"] = r.label;
  j["cloud_ratio"] = r.cloud_ratio;
  j["low_contrast"] = r.low_contrast;
  j["dup_factor"] = r.duplication_factor;
  return j;
}

inline TileRecord tile_record_from_json(const nlohmann::json& j) {
  TileRecord r;
  try {
    r.scene_id = j.at("scene_id").get<std::string>();
    r.tile_row = j.at("tile_row").get<std::size_t>();
    r.tile_col = j.at("tile_col").get<std::size_t>();
    r.offset_col = j.at("offset").at(0).get<std::size_t>();
    r.offset_row = j.at("offset").at(1).get<std::size_t>();
    std::array<double, 6> gt{};
    for (std::size_t i = 0; i < 6; ++i) gt[i] = j.at("geotransform").at(i).get<double>();
    r.geotransform = GeoTransform::from_array(gt);
    for (std::size_t i = 0; i < kActiveClassCount; ++i)
      r.representation.proportions[i] = j.at("representation").at(i).get<double>();
    r.label = j.at("label").get<int>();
    r.cloud_ratio = j.at("cloud_ratio").get<double>();
    r.low_contrast = j.at("low_contrast").get<bool>();
    r.duplication_factor = j.at("dup_factor").get<int>();
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::MalformedHeader, std::string("manifest line: ") + e.what());
  }
  return r;
}

inline void write_manifest(const std::vector<TileRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(Errc::SourceUnreadable, "cannot write manifest: " + path.string());
  for (const TileRecord& r : records) out << tile_record_to_json(r).dump() << '\n';
}

inline std::vector<TileRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) raise(Errc::SourceUnreadable, "cannot open manifest: " + path.string());
  std::vector<TileRecord> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::MalformedHeader, std::string("manifest line: ") + e.what());
    }
    records.push_back(tile_record_from_json(j));
  }
  return records;
}

struct SceneIngestResult {
  std::string scene_id;
  std::vector<TileRecord> records;
  std::int64_t discarded_cloud = 0;
  std::int64_t discarded_low_contrast = 0;
  std::int64_t discarded_supervision = 0;
  bool failed = false;
  std::string error;
};

// Filters and supervises one scene. Discard reasons are first-match: cloud,
// then contrast, then supervision.
inline SceneIngestResult ingest_scene(const RasterGrid& scene, const std::string& scene_id,
                                      const AreaIndex& index, const IngestConfig& cfg) {
  SceneIngestResult result;
  result.scene_id = scene_id;
  for (const TilePlacement& placement : tile_scene(scene, cfg)) {
    const RasterGrid tile =
        crop(scene, placement.offset_col, placement.offset_row, cfg.tile_size, cfg.tile_size);
    const double rc = cloud_ratio(tile, cfg.cloud_threshold);
    if (rc > cfg.cloud_discard_ratio) {
      ++result.discarded_cloud;
      continue;
    }
    if (is_low_contrast(tile, cfg)) {
      ++result.discarded_low_contrast;
      continue;
    }
    TileRecord record;
    try {
      record.representation = supervise_image(index, placement.geotransform, cfg.tile_size);
    } catch (const Error&) {
      ++result.discarded_supervision;
      continue;
    }
    record.scene_id = scene_id;
    record.tile_row = placement.tile_row;
    record.tile_col = placement.tile_col;
    record.offset_col = placement.offset_col;
    record.offset_row = placement.offset_row;
    record.geotransform = placement.geotransform;
    record.label = argmax_label(record.representation);
    record.cloud_ratio = rc;
    record.low_contrast = false;
    result.records.push_back(std::move(record));
  }
  return result;
}

struct IngestSummary {
  std::int64_t kept = 0;
  std::int64_t discarded_cloud = 0;
  std::int64_t discarded_low_contrast = 0;
  std::int64_t discarded_supervision = 0;
  std::vector<std::pair<std::string, std::string>> failed_scenes;  // (scene_id, error)
  std::array<std::int64_t, kActiveClassCount> class_counts{};
  std::array<int, kActiveClassCount> class_dup_factors{};

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["kept"] = kept;
    nlohmann::ordered_json discarded;
    discarded["cloud"] = discarded_cloud;
    discarded["low_contrast"] = discarded_low_contrast;
    discarded["supervision"] = discarded_supervision;
    j["discarded"] = std::move(discarded);
    nlohmann::ordered_json failures = nlohmann::ordered_json::array();
    for (const auto& [scene, err] : failed_scenes)
      failures.push_back({{"scene_id", scene}, {"error", err}});
    j["failed_scenes"] = std::move(failures);
    nlohmann::ordered_json classes = nlohmann::ordered_json::array();
    for (int c = 0; c < kActiveClassCount; ++c) {
      nlohmann::ordered_json row;
      row["index"] = c;
      row["name"] = kActiveClassNames[static_cast<std::size_t>(c)];
      row["count"] = class_counts[static_cast<std::size_t>(c)];
      row["ratio"] = kept > 0 ? static_cast<double>(class_counts[static_cast<std::size_t>(c)]) /
                                    static_cast<double>(kept)
                              : 0.0;
      row["dup_factor"] = class_dup_factors[static_cast<std::size_t>(c)];
      classes.push_back(std::move(row));
    }
    j["classes"] = std::move(classes);
    return j;
  }
};

// Scenes fan out across workers; records merge in (scene_id, tile_row,
// tile_col) order before the single writer emits the manifest, so the output
// bytes do not depend on the worker count.
inline IngestSummary build_manifest(const std::vector<std::filesystem::path>& scene_paths,
                                    const AreaIndex& index, const IngestConfig& cfg,
                                    const std::filesystem::path& out_path, unsigned workers = 1) {
  cfg.validate();
  std::vector<SceneIngestResult> results(scene_paths.size());
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= scene_paths.size()) return;
      const std::string scene_id = scene_paths[i].stem().string();
      try {
        const RasterGrid scene = read_raster(scene_paths[i]);
        results[i] = ingest_scene(scene, scene_id, index, cfg);
      } catch (const std::exception& e) {
        results[i].scene_id = scene_id;
        results[i].failed = true;
        results[i].error = e.what();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }

  IngestSummary summary;
  std::vector<TileRecord> records;
  for (const SceneIngestResult& r : results) {
    if (r.failed) {
      summary.failed_scenes.emplace_back(r.scene_id, r.error);
      continue;
    }
    summary.discarded_cloud += r.discarded_cloud;
    summary.discarded_low_contrast += r.discarded_low_contrast;
    summary.discarded_supervision += r.discarded_supervision;
    records.insert(records.end(), r.records.begin(), r.records.end());
  }
  std::sort(records.begin(), records.end(), [](const TileRecord& a, const TileRecord& b) {
    return std::tie(a.scene_id, a.tile_row, a.tile_col) < std::tie(b.scene_id, b.tile_row, b.tile_col);
  });
  if (!records.empty()) balance_classes(records, cfg.max_duplication_factor);
  summary.kept = static_cast<std::int64_t>(records.size());
  for (const TileRecord& r : records) {
    ++summary.class_counts[static_cast<std::size_t>(r.label)];
    summary.class_dup_factors[static_cast<std::size_t>(r.label)] = r.duplication_factor;
  }
  write_manifest(records, out_path);
  return summary;
}

}  // namespace geokr
