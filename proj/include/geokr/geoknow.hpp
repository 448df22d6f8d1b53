#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "geokr/error.hpp"
#include "geokr/raster.hpp"

namespace geokr {

// The ten GlobeLand30-style land-cover classes. `active_index` is the slot in
// the supervision vector (alphabetical by class name); -1 marks the dropped
// shrubland/tundra classes.
struct LandCoverClass {
  int code;
  const char* name;
  int active_index;
};

inline constexpr int kActiveClassCount = 8;

inline constexpr std::array<LandCoverClass, 10> kLandCoverClasses{{
    {10, "Cultivated land", 2},
    {20, "Forest", 3},
    {30, "Grassland", 4},
    {40, "Shrubland", -1},
    {50, "Wetland", 7},
    {60, "Water bodies", 6},
    {70, "Tundra", -1},
    {80, "Artificial surfaces", 0},
    {90, "Bareland", 1},
    {100, "Permanent snow", 5},
}};

// Land-cover code for each supervision-vector slot.
inline constexpr std::array<int, kActiveClassCount> kActiveClassCodes{80, 90, 10, 20, 30, 100, 60, 50};

inline constexpr std::array<const char*, kActiveClassCount> kActiveClassNames{
    "Artificial surfaces", "Bareland", "Cultivated land", "Forest",
    "Grassland",           "Permanent snow", "Water bodies", "Wetland"};

// Index into kLandCoverClasses for a raster sample value, or -1 if the value
// is not a land-cover code.
inline int land_cover_slot(std::uint16_t code) {
  if (code % 10 != 0 || code < 10 || code > 100) return -1;
  return static_cast<int>(code / 10) - 1;
}

inline int active_index_for_code(std::uint16_t code) {
  const int slot = land_cover_slot(code);
  return slot < 0 ? -1 : kLandCoverClasses[static_cast<std::size_t>(slot)].active_index;
}

// Per-class pixel counts S(i). Dropped classes and invalid samples are tallied
// but excluded from the supervision normalization.
struct ClassHistogram {
  std::array<std::int64_t, 10> counts{};  // indexed by code/10 - 1
  std::int64_t invalid = 0;

  std::int64_t count_for_code(std::uint16_t code) const {
    const int slot = land_cover_slot(code);
    return slot < 0 ? 0 : counts[static_cast<std::size_t>(slot)];
  }

  std::int64_t active_total() const {
    std::int64_t total = 0;
    for (std::size_t i = 0; i < counts.size(); ++i)
      if (kLandCoverClasses[i].active_index >= 0) total += counts[i];
    return total;
  }

  std::int64_t dropped_total() const {
    std::int64_t total = 0;
    for (std::size_t i = 0; i < counts.size(); ++i)
      if (kLandCoverClasses[i].active_index < 0) total += counts[i];
    return total;
  }

  std::int64_t grid_total() const { return active_total() + dropped_total() + invalid; }
};

// The supervision vector A: proportions of the 8 active classes, summing to 1.
struct KnowledgeRepresentation {
  std::array<double, kActiveClassCount> proportions{};

  double sum() const { return std::accumulate(proportions.begin(), proportions.end(), 0.0); }

  bool is_valid(double tol = 1e-9) const {
    for (double p : proportions)
      if (!(p >= 0.0)) return false;
    return std::abs(sum() - 1.0) <= tol;
  }
};

struct AreaEntry {
  std::int64_t area_id = 0;
  GeoBounds bounds;
  std::string raster_path;  // empty for in-memory fixtures
  std::shared_ptr<const RasterGrid> grid;
};

// Immutable once built; shareable across concurrent workers.
struct AreaIndex {
  std::vector<AreaEntry> entries;

  void add(std::int64_t area_id, std::shared_ptr<const RasterGrid> grid, std::string path = {}) {
    AreaEntry e;
    e.area_id = area_id;
    e.bounds = grid->bounds();
    e.raster_path = std::move(path);
    e.grid = std::move(grid);
    entries.push_back(std::move(e));
  }

  // JSON array of {"area_id", "raster", "bounds": [min_x, min_y, max_x, max_y]}.
  static AreaIndex from_manifest(const std::filesystem::path& manifest_path, bool load = true) {
    std::ifstream in(manifest_path);
    if (!in) raise(Errc::SourceUnreadable, "cannot open area index: " + manifest_path.string());
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      raise(Errc::MalformedHeader, e.what());
    }
    if (!doc.is_array()) raise(Errc::MalformedHeader, "area index must be a JSON array");
    AreaIndex index;
    const std::filesystem::path dir = manifest_path.parent_path();
    for (const auto& item : doc) {
      AreaEntry e;
      try {
        e.area_id = item.at("area_id").get<std::int64_t>();
        e.raster_path = item.at("raster").get<std::string>();
        const auto& b = item.at("bounds");
        e.bounds = GeoBounds{b.at(0).get<double>(), b.at(2).get<double>(),
                             b.at(1).get<double>(), b.at(3).get<double>()};
      } catch (const nlohmann::json::exception& ex) {
        raise(Errc::MalformedHeader, ex.what());
      }
      std::filesystem::path raster = e.raster_path;
      if (raster.is_relative()) raster = dir / raster;
      e.raster_path = raster.string();
      if (load) e.grid = std::make_shared<const RasterGrid>(read_raster(raster));
      index.entries.push_back(std::move(e));
    }
    for (std::size_t i = 0; i < index.entries.size(); ++i)
      for (std::size_t j = i + 1; j < index.entries.size(); ++j)
        if (index.entries[i].area_id == index.entries[j].area_id)
          raise(Errc::MalformedHeader, "duplicate area_id " + std::to_string(index.entries[i].area_id));
    return index;
  }

  void write_manifest(const std::filesystem::path& path) const {
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const AreaEntry& e : entries) {
      nlohmann::ordered_json item;
      item["area_id"] = e.area_id;
      item["raster"] = e.raster_path;
      item["bounds"] = {e.bounds.min_x, e.bounds.min_y, e.bounds.max_x, e.bounds.max_y};
      doc.push_back(std::move(item));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) raise(Errc::SourceUnreadable, "cannot write area index: " + path.string());
    out << doc.dump(2) << '\n';
  }
};

// Area whose bounds fully contain the image; smallest area_id wins on overlap
// seams so manifests stay reproducible.
inline const AreaEntry& locate_area(const AreaIndex& index, const GeoTransform& image_gt,
                                    std::size_t size) {
  if (index.entries.empty()) throw std::invalid_argument("locate_area: empty area index");
  const GeoBounds image = bounds_of(image_gt, size, size);
  const AreaEntry* best = nullptr;
  for (const AreaEntry& e : index.entries)
    if (contains(e.bounds, image) && (best == nullptr || e.area_id < best->area_id)) best = &e;
  if (best == nullptr) raise(Errc::NoHostingArea, "image not contained in any indexed area");
  return *best;
}

// Fractional pixel coordinates of the image footprint inside the area raster.
struct PixelWindow {
  double left = 0.0;
  double top = 0.0;
  double right = 0.0;
  double bottom = 0.0;
};

inline PixelWindow pixel_window(const GeoTransform& image_gt, std::size_t size,
                                const GeoTransform& area_gt) {
  if (area_gt.pixel_width == 0.0 || area_gt.pixel_height == 0.0)
    throw std::invalid_argument("pixel_window: area resolution terms must be nonzero");
  const double s = static_cast<double>(size);
  PixelWindow w;
  w.left = (image_gt.origin_x - area_gt.origin_x) / area_gt.pixel_width;
  w.top = (image_gt.origin_y - area_gt.origin_y) / area_gt.pixel_height;
  w.right = w.left + image_gt.pixel_width * s / area_gt.pixel_width;
  w.bottom = w.top + image_gt.pixel_height * s / area_gt.pixel_height;
  return w;
}

// Half-away-from-zero; the discretization rule for fractional windows.
inline std::int64_t round_pixel(double x) { return std::llround(x); }

// Sub-grid over rows [round(top), round(bottom)) x cols [round(left), round(right)).
inline RasterGrid extract_landcover(const RasterGrid& area, const PixelWindow& window) {
  const std::int64_t left = round_pixel(window.left);
  const std::int64_t top = round_pixel(window.top);
  const std::int64_t right = round_pixel(window.right);
  const std::int64_t bottom = round_pixel(window.bottom);
  if (left < 0 || top < 0 || right > static_cast<std::int64_t>(area.width) ||
      bottom > static_cast<std::int64_t>(area.height) || left >= right || top >= bottom)
    raise(Errc::WindowOutOfBounds,
          "window [" + std::to_string(left) + "," + std::to_string(top) + "," +
              std::to_string(right) + "," + std::to_string(bottom) + ") outside " +
              std::to_string(area.width) + "x" + std::to_string(area.height) + " area");
  return crop(area, static_cast<std::size_t>(left), static_cast<std::size_t>(top),
              static_cast<std::size_t>(right - left), static_cast<std::size_t>(bottom - top));
}

inline ClassHistogram class_histogram(const RasterGrid& m) {
  if (m.bands != 1) raise(Errc::NotLandCover, "land-cover grid must have 1 band, got " + std::to_string(m.bands));
  ClassHistogram hist;
  for (std::uint16_t v : m.values) {
    if (m.nodata && static_cast<double>(v) == *m.nodata) {
      ++hist.invalid;
      continue;
    }
    const int slot = land_cover_slot(v);
    if (slot < 0)
      ++hist.invalid;
    else
      ++hist.counts[static_cast<std::size_t>(slot)];
  }
  return hist;
}

// A(i) = S(i) / sum_j S(j) over the 8 active classes; dropped and invalid
// samples appear in neither numerator nor denominator.
inline KnowledgeRepresentation knowledge_representation(const ClassHistogram& hist) {
  const std::int64_t total = hist.active_total();
  if (total <= 0) raise(Errc::NoSupportedClasses, "no samples of any active land-cover class");
  KnowledgeRepresentation rep;
  for (std::size_t i = 0; i < kLandCoverClasses.size(); ++i) {
    const int active = kLandCoverClasses[i].active_index;
    if (active >= 0)
      rep.proportions[static_cast<std::size_t>(active)] =
          static_cast<double>(hist.counts[i]) / static_cast<double>(total);
  }
  return rep;
}

// Ties break toward the smallest index.
inline int argmax_label(const KnowledgeRepresentation& rep) {
  int best = 0;
  for (int i = 1; i < kActiveClassCount; ++i)
    if (rep.proportions[static_cast<std::size_t>(i)] > rep.proportions[static_cast<std::size_t>(best)])
      best = i;
  return best;
}

// The full supervision extraction: locate the hosting area, window the image
// into it, slice the land-cover map and normalize the class counts.
inline KnowledgeRepresentation supervise_image(const AreaIndex& index, const GeoTransform& image_gt,
                                               std::size_t size) {
  const AreaEntry& area = locate_area(index, image_gt, size);
  std::shared_ptr<const RasterGrid> grid = area.grid;
  if (!grid) grid = std::make_shared<const RasterGrid>(read_raster(area.raster_path));
  const PixelWindow window = pixel_window(image_gt, size, grid->geotransform);
  const RasterGrid m = extract_landcover(*grid, window);
  return knowledge_representation(class_histogram(m));
}

}  // namespace geokr
