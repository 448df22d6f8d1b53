#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "geokr/error.hpp"
#include "geokr/geoknow.hpp"
#include "geokr/raster.hpp"
#include "geokr/rng.hpp"

namespace geokr {

// Synthetic scene family: each scene is a block mosaic of the eight active
// classes. Classes share almost the same mean color and differ mainly in
// stripe orientation, so pooled raw pixels carry little class signal while a
// trained encoder can pick up the texture.
struct SynthConfig {
  std::size_t scenes = 8;
  std::size_t scene_size = 256;
  std::size_t block_size = 32;
  double resolution = 1.0;       // map units per image pixel
  double origin_x = 500000.0;
  double origin_y = 4000000.0;
  std::size_t area_downscale = 2;  // land-cover grids are coarser by this factor
  double label_noise_rate = 0.05;  // per-block chance of a flipped label in the second epoch
  double stripe_amplitude = 40.0;
  double stripe_period = 6.0;      // pixels
  double noise_amplitude = 10.0;   // uniform pixel noise, +-
  double color_spread = 6.0;       // per-class mean color offsets stay within +- this
  std::uint64_t seed = 7;

  void validate() const {
    if (scenes == 0) raise(Errc::InvalidConfig, "scenes must be positive");
    if (scene_size == 0 || block_size == 0) raise(Errc::InvalidConfig, "sizes must be positive");
    if (scene_size % block_size != 0)
      raise(Errc::InvalidConfig, "scene_size must be a multiple of block_size");
    if (area_downscale == 0 || scene_size % area_downscale != 0 || block_size % area_downscale != 0)
      raise(Errc::InvalidConfig, "area_downscale must divide scene_size and block_size");
    if (!(label_noise_rate >= 0.0 && label_noise_rate <= 1.0))
      raise(Errc::InvalidConfig, "label_noise_rate must be in [0, 1]");
    if (stripe_period <= 0.0) raise(Errc::InvalidConfig, "stripe_period must be positive");
    if (resolution <= 0.0) raise(Errc::InvalidConfig, "resolution must be positive");
  }

  static SynthConfig from_json(const nlohmann::json& j) {
    SynthConfig cfg;
    if (j.contains("scenes")) cfg.scenes = j.at("scenes").get<std::size_t>();
    if (j.contains("scene_size")) cfg.scene_size = j.at("scene_size").get<std::size_t>();
    if (j.contains("block_size")) cfg.block_size = j.at("block_size").get<std::size_t>();
    if (j.contains("resolution")) cfg.resolution = j.at("resolution").get<double>();
    if (j.contains("origin_x")) cfg.origin_x = j.at("origin_x").get<double>();
    if (j.contains("origin_y")) cfg.origin_y = j.at("origin_y").get<double>();
    if (j.contains("area_downscale")) cfg.area_downscale = j.at("area_downscale").get<std::size_t>();
    if (j.contains("label_noise_rate")) cfg.label_noise_rate = j.at("label_noise_rate").get<double>();
    if (j.contains("stripe_amplitude")) cfg.stripe_amplitude = j.at("stripe_amplitude").get<double>();
    if (j.contains("stripe_period")) cfg.stripe_period = j.at("stripe_period").get<double>();
    if (j.contains("noise_amplitude")) cfg.noise_amplitude = j.at("noise_amplitude").get<double>();
    if (j.contains("color_spread")) cfg.color_spread = j.at("color_spread").get<double>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["scenes"] = scenes;
    j["scene_size"] = scene_size;
    j["block_size"] = block_size;
    j["resolution"] = resolution;
    j["origin_x"] = origin_x;
    j["origin_y"] = origin_y;
    j["area_downscale"] = area_downscale;
    j["label_noise_rate"] = label_noise_rate;
    j["stripe_amplitude"] = stripe_amplitude;
    j["stripe_period"] = stripe_period;
    j["noise_amplitude"] = noise_amplitude;
    j["color_spread"] = color_spread;
    j["seed"] = seed;
    return j;
  }
};

namespace detail {

// Small deterministic per-class, per-channel color offset.
inline double class_color_offset(int active_index, std::size_t channel, double spread) {
  const int h = (active_index * 7 + static_cast<int>(channel) * 13) % 13;  // 0..12
  return (static_cast<double>(h) - 6.0) / 6.0 * spread;
}

}  // namespace detail

struct SynthSceneTruth {
  std::string scene_id;
  std::vector<int> clean_blocks;  // active indices, row-major over the block grid
  std::vector<int> noisy_blocks;
  std::size_t blocks_per_side = 0;
  int flipped = 0;
};

struct SynthResult {
  std::vector<SynthSceneTruth> scenes;
  std::filesystem::path scenes_dir;
  std::filesystem::path area_index_clean;
  std::filesystem::path area_index_noisy;
  int total_flipped = 0;
  std::size_t total_blocks = 0;
};

// Writes scenes/, landcover_clean/, landcover/ (label-noise applied),
// area_index_clean.json, area_index.json and truth.json under out_dir.
inline SynthResult synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const std::filesystem::path scenes_dir = out_dir / "scenes";
  const std::filesystem::path clean_dir = out_dir / "landcover_clean";
  const std::filesystem::path noisy_dir = out_dir / "landcover";
  std::filesystem::create_directories(scenes_dir);
  std::filesystem::create_directories(clean_dir);
  std::filesystem::create_directories(noisy_dir);

  Rng rng(cfg.seed);
  const std::size_t bps = cfg.scene_size / cfg.block_size;  // blocks per side
  const std::size_t area_size = cfg.scene_size / cfg.area_downscale;
  const std::size_t area_block = cfg.block_size / cfg.area_downscale;
  const double two_pi = 2.0 * 3.14159265358979323846;

  SynthResult result;
  result.scenes_dir = scenes_dir;
  AreaIndex clean_index;
  AreaIndex noisy_index;

  for (std::size_t si = 0; si < cfg.scenes; ++si) {
    char id_buf[16];
    std::snprintf(id_buf, sizeof id_buf, "scene_%03zu", si);
    const std::string scene_id = id_buf;
    char area_buf[16];
    std::snprintf(area_buf, sizeof area_buf, "area_%03zu", si);
    const std::string area_id = area_buf;

    SynthSceneTruth truth;
    truth.scene_id = scene_id;
    truth.blocks_per_side = bps;
    truth.clean_blocks.resize(bps * bps);
    truth.noisy_blocks.resize(bps * bps);
    std::vector<double> phases(bps * bps);
    for (std::size_t b = 0; b < bps * bps; ++b) {
      truth.clean_blocks[b] = static_cast<int>(rng.uniform_int(0, kActiveClassCount - 1));
      phases[b] = rng.uniform(0.0, two_pi);
      int label = truth.clean_blocks[b];
      if (rng.bernoulli(cfg.label_noise_rate)) {
        // replace with a different class, uniform over the remaining seven
        const int shift = static_cast<int>(rng.uniform_int(1, kActiveClassCount - 1));
        label = (label + shift) % kActiveClassCount;
        ++truth.flipped;
      }
      truth.noisy_blocks[b] = label;
    }
    result.total_flipped += truth.flipped;
    result.total_blocks += bps * bps;

    GeoTransform scene_gt;
    scene_gt.origin_x = cfg.origin_x + static_cast<double>(si) *
                                           static_cast<double>(cfg.scene_size + 64) * cfg.resolution;
    scene_gt.origin_y = cfg.origin_y;
    scene_gt.pixel_width = cfg.resolution;
    scene_gt.pixel_height = -cfg.resolution;

    RasterGrid scene = RasterGrid::make(cfg.scene_size, cfg.scene_size, 3, SampleType::U8, scene_gt);
    for (std::size_t y = 0; y < cfg.scene_size; ++y)
      for (std::size_t x = 0; x < cfg.scene_size; ++x) {
        const std::size_t b = (y / cfg.block_size) * bps + (x / cfg.block_size);
        const int cls = truth.clean_blocks[b];
        const double theta = static_cast<double>(cls) * (3.14159265358979323846 / 8.0);
        const double wave =
            cfg.stripe_amplitude *
            std::sin(two_pi * (std::cos(theta) * static_cast<double>(x) +
                               std::sin(theta) * static_cast<double>(y)) /
                         cfg.stripe_period +
                     phases[b]);
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double base = 120.0 + detail::class_color_offset(cls, ch, cfg.color_spread);
          const double noise = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude);
          const double v = std::clamp(base + wave + noise, 0.0, 255.0);
          scene.at(ch, y, x) = static_cast<std::uint16_t>(std::llround(v));
        }
      }
    write_raster(scene, scenes_dir / scene_id);

    GeoTransform area_gt = scene_gt;
    area_gt.pixel_width = cfg.resolution * static_cast<double>(cfg.area_downscale);
    area_gt.pixel_height = -cfg.resolution * static_cast<double>(cfg.area_downscale);
    auto render_area = [&](const std::vector<int>& blocks) {
      RasterGrid area = RasterGrid::make(area_size, area_size, 1, SampleType::U8, area_gt);
      for (std::size_t y = 0; y < area_size; ++y)
        for (std::size_t x = 0; x < area_size; ++x) {
          const std::size_t b = (y / area_block) * bps + (x / area_block);
          area.at(0, y, x) = kActiveClassCodes[static_cast<std::size_t>(blocks[b])];
        }
      return area;
    };
    const RasterGrid clean_area = render_area(truth.clean_blocks);
    const RasterGrid noisy_area = render_area(truth.noisy_blocks);
    write_raster(clean_area, clean_dir / area_id);
    write_raster(noisy_area, noisy_dir / area_id);
    // Manifest rows hold paths relative to the index file so the generated
    // tree stays relocatable; AreaIndex::from_manifest resolves them against
    // the manifest's own directory.
    clean_index.add(static_cast<std::int64_t>(si), std::make_shared<RasterGrid>(clean_area),
                    (std::filesystem::path("landcover_clean") / (area_id + ".rhdr")).string());
    noisy_index.add(static_cast<std::int64_t>(si), std::make_shared<RasterGrid>(noisy_area),
                    (std::filesystem::path("landcover") / (area_id + ".rhdr")).string());
    result.scenes.push_back(std::move(truth));
  }

  result.area_index_clean = out_dir / "area_index_clean.json";
  result.area_index_noisy = out_dir / "area_index.json";
  clean_index.write_manifest(result.area_index_clean);
  noisy_index.write_manifest(result.area_index_noisy);

  nlohmann::ordered_json truth_json;
  truth_json["config"] = cfg.to_json();
  truth_json["total_blocks"] = result.total_blocks;
  truth_json["total_flipped"] = result.total_flipped;
  nlohmann::ordered_json scenes_json = nlohmann::ordered_json::array();
  for (const SynthSceneTruth& t : result.scenes) {
    nlohmann::ordered_json s;
    s["scene_id"] = t.scene_id;
    s["blocks_per_side"] = t.blocks_per_side;
    s["clean_blocks"] = t.clean_blocks;
    s["noisy_blocks"] = t.noisy_blocks;
    s["flipped"] = t.flipped;
    scenes_json.push_back(std::move(s));
  }
  truth_json["scenes"] = std::move(scenes_json);
  std::ofstream out(out_dir / "truth.json", std::ios::trunc);
  if (!out) raise(Errc::SourceUnreadable, "cannot write truth.json in " + out_dir.string());
  out << truth_json.dump(2) << '\n';
  return result;
}

}  // namespace geokr
