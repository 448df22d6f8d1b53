#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "geokr/error.hpp"

namespace geokr {

// Six-element affine map from pixel indices to geographic coordinates.
// Rotation terms are carried for container fidelity but must be zero.
struct GeoTransform {
  double origin_x = 0.0;      // gt0: geographic x of the upper-left corner
  double pixel_width = 1.0;   // gt1: horizontal resolution (nonzero)
  double row_rotation = 0.0;  // gt2: must be 0
  double origin_y = 0.0;      // gt3: geographic y of the upper-left corner
  double col_rotation = 0.0;  // gt4: must be 0
  double pixel_height = -1.0; // gt5: vertical resolution (nonzero, usually negative)

  std::array<double, 6> to_array() const {
    return {origin_x, pixel_width, row_rotation, origin_y, col_rotation, pixel_height};
  }

  static GeoTransform from_array(const std::array<double, 6>& a) {
    return GeoTransform{a[0], a[1], a[2], a[3], a[4], a[5]};
  }

  bool is_valid() const {
    return row_rotation == 0.0 && col_rotation == 0.0 && pixel_width != 0.0 && pixel_height != 0.0;
  }

  bool operator==(const GeoTransform& o) const { return to_array() == o.to_array(); }
};

struct GeoPoint {
  double x = 0.0;
  double y = 0.0;
};

// Geographic coordinate of a pixel's upper-left corner. Fractional indices are
// allowed; (width, height) maps to the lower-right scene corner.
inline GeoPoint forward_map(const GeoTransform& gt, double col, double row) {
  return GeoPoint{gt.origin_x + col * gt.pixel_width, gt.origin_y + row * gt.pixel_height};
}

struct GeoBounds {
  double min_x = 0.0;
  double max_x = 0.0;
  double min_y = 0.0;
  double max_y = 0.0;

  bool operator==(const GeoBounds& o) const = default;
};

inline GeoBounds bounds_of(const GeoTransform& gt, std::size_t width, std::size_t height) {
  if (width == 0 || height == 0) throw std::invalid_argument("bounds_of: empty raster");
  const GeoPoint a = forward_map(gt, 0, 0);
  const GeoPoint b = forward_map(gt, static_cast<double>(width), static_cast<double>(height));
  return GeoBounds{std::min(a.x, b.x), std::max(a.x, b.x), std::min(a.y, b.y), std::max(a.y, b.y)};
}

// Closed comparison: boundary touching counts as inside, so images whose edge
// coincides with an area edge still resolve to that area.
inline bool contains(const GeoBounds& outer, const GeoBounds& inner) {
  return inner.min_x >= outer.min_x && inner.max_x <= outer.max_x &&
         inner.min_y >= outer.min_y && inner.max_y <= outer.max_y;
}

enum class SampleType { U8, U16 };

inline double sample_type_range(SampleType t) { return t == SampleType::U8 ? 255.0 : 65535.0; }

inline std::uint16_t sample_type_max(SampleType t) { return t == SampleType::U8 ? 255 : 65535; }

inline const char* sample_type_tag(SampleType t) { return t == SampleType::U8 ? "u8" : "u16"; }

inline SampleType sample_type_from_tag(const std::string& tag) {
  if (tag == "u8") return SampleType::U8;
  if (tag == "u16") return SampleType::U16;
  raise(Errc::UnsupportedSampleType, "sample_type '" + tag + "' (expected u8|u16)");
}

// In-memory raster. Samples are widened to 16 bits regardless of the container
// sample type; row-major within band, band-sequential.
struct RasterGrid {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t bands = 1;
  SampleType sample_type = SampleType::U8;
  std::vector<std::uint16_t> values;
  GeoTransform geotransform;
  std::string crs_tag = "WGS-84";
  std::optional<double> nodata;

  static RasterGrid make(std::size_t width, std::size_t height, std::size_t bands,
                         SampleType type, const GeoTransform& gt) {
    RasterGrid g;
    g.width = width;
    g.height = height;
    g.bands = bands;
    g.sample_type = type;
    g.geotransform = gt;
    g.values.assign(width * height * bands, 0);
    return g;
  }

  std::size_t sample_count() const { return width * height * bands; }

  std::uint16_t at(std::size_t band, std::size_t row, std::size_t col) const {
    return values[(band * height + row) * width + col];
  }

  std::uint16_t& at(std::size_t band, std::size_t row, std::size_t col) {
    return values[(band * height + row) * width + col];
  }

  GeoBounds bounds() const { return bounds_of(geotransform, width, height); }

  bool operator==(const RasterGrid& o) const {
    return width == o.width && height == o.height && bands == o.bands &&
           sample_type == o.sample_type && values == o.values &&
           geotransform == o.geotransform && crs_tag == o.crs_tag && nodata == o.nodata;
  }
};

// Sub-grid over half-open pixel ranges, all bands; geotransform translated to
// the crop origin.
inline RasterGrid crop(const RasterGrid& g, std::size_t col0, std::size_t row0,
                       std::size_t width, std::size_t height) {
  if (col0 + width > g.width || row0 + height > g.height)
    raise(Errc::WindowOutOfBounds, "crop exceeds grid extent");
  GeoTransform gt = g.geotransform;
  const GeoPoint origin = forward_map(gt, static_cast<double>(col0), static_cast<double>(row0));
  gt.origin_x = origin.x;
  gt.origin_y = origin.y;
  RasterGrid out = RasterGrid::make(width, height, g.bands, g.sample_type, gt);
  out.crs_tag = g.crs_tag;
  out.nodata = g.nodata;
  for (std::size_t b = 0; b < g.bands; ++b)
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t c = 0; c < width; ++c)
        out.at(b, r, c) = g.at(b, row0 + r, col0 + c);
  return out;
}

namespace detail {

inline std::filesystem::path strip_raster_ext(const std::filesystem::path& path) {
  if (path.extension() == ".rhdr" || path.extension() == ".rblob") {
    std::filesystem::path base = path;
    base.replace_extension();
    return base;
  }
  return path;
}

}  // namespace detail

// Two-file container: <name>.rhdr JSON header + <name>.rblob little-endian
// samples. `path` may be the base name or either file.
inline void write_raster(const RasterGrid& g, const std::filesystem::path& path) {
  if (g.values.size() != g.sample_count())
    raise(Errc::SizeMismatch, "value array does not match declared dimensions");
  const std::uint16_t max_value = sample_type_max(g.sample_type);
  for (std::uint16_t v : g.values)
    if (v > max_value) raise(Errc::SampleOutOfRange, "sample exceeds " + std::string(sample_type_tag(g.sample_type)) + " range");

  const std::filesystem::path base = detail::strip_raster_ext(path);
  nlohmann::ordered_json header;
  header["width"] = g.width;
  header["height"] = g.height;
  header["bands"] = g.bands;
  header["sample_type"] = sample_type_tag(g.sample_type);
  header["geotransform"] = g.geotransform.to_array();
  header["crs"] = g.crs_tag;
  if (g.nodata) header["nodata"] = *g.nodata;

  {
    std::ofstream hdr(base.string() + ".rhdr", std::ios::trunc);
    if (!hdr) raise(Errc::SourceUnreadable, "cannot open for write: " + base.string() + ".rhdr");
    hdr << header.dump(2) << '\n';
  }
  std::ofstream blob(base.string() + ".rblob", std::ios::binary | std::ios::trunc);
  if (!blob) raise(Errc::SourceUnreadable, "cannot open for write: " + base.string() + ".rblob");
  std::vector<unsigned char> bytes;
  if (g.sample_type == SampleType::U8) {
    bytes.reserve(g.values.size());
    for (std::uint16_t v : g.values) bytes.push_back(static_cast<unsigned char>(v));
  } else {
    bytes.reserve(g.values.size() * 2);
    for (std::uint16_t v : g.values) {
      bytes.push_back(static_cast<unsigned char>(v & 0xFF));
      bytes.push_back(static_cast<unsigned char>(v >> 8));
    }
  }
  blob.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline RasterGrid read_raster(const std::filesystem::path& path) {
  const std::filesystem::path base = detail::strip_raster_ext(path);
  std::ifstream hdr(base.string() + ".rhdr");
  if (!hdr) raise(Errc::SourceUnreadable, "missing header: " + base.string() + ".rhdr");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hdr);
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::MalformedHeader, e.what());
  }

  RasterGrid g;
  try {
    g.width = header.at("width").get<std::size_t>();
    g.height = header.at("height").get<std::size_t>();
    g.bands = header.at("bands").get<std::size_t>();
    g.sample_type = sample_type_from_tag(header.at("sample_type").get<std::string>());
    const auto gt = header.at("geotransform");
    if (!gt.is_array() || gt.size() != 6)
      raise(Errc::MalformedHeader, "geotransform must be an array of 6 numbers");
    std::array<double, 6> a{};
    for (std::size_t i = 0; i < 6; ++i) a[i] = gt.at(i).get<double>();
    g.geotransform = GeoTransform::from_array(a);
    g.crs_tag = header.at("crs").get<std::string>();
    if (header.contains("nodata")) g.nodata = header.at("nodata").get<double>();
  } catch (const Error&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    raise(Errc::MalformedHeader, e.what());
  }
  if (g.width == 0 || g.height == 0 || g.bands == 0)
    raise(Errc::MalformedHeader, "zero-sized raster");
  if (!g.geotransform.is_valid())
    raise(Errc::MalformedHeader, "geotransform has rotation or zero resolution");
  if (g.crs_tag != "WGS-84")
    raise(Errc::MalformedHeader, "crs must be WGS-84, got '" + g.crs_tag + "'");

  std::ifstream blob(base.string() + ".rblob", std::ios::binary);
  if (!blob) raise(Errc::SourceUnreadable, "missing blob: " + base.string() + ".rblob");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)),
                                   std::istreambuf_iterator<char>());
  const std::size_t unit = g.sample_type == SampleType::U8 ? 1 : 2;
  const std::size_t expected = g.sample_count() * unit;
  if (bytes.size() != expected)
    raise(Errc::SizeMismatch, "blob holds " + std::to_string(bytes.size()) + " bytes, header implies " +
                                  std::to_string(expected));
  g.values.resize(g.sample_count());
  if (g.sample_type == SampleType::U8) {
    for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = bytes[i];
  } else {
    for (std::size_t i = 0; i < g.values.size(); ++i)
      g.values[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  }
  return g;
}

}  // namespace geokr
