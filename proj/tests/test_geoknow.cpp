#include <catch2/catch_amalgamated.hpp>

#include <geokr/geoknow.hpp>
#include <geokr/rng.hpp>

#include "test_util.hpp"

using namespace geokr;
using testutil::TempDir;

namespace {

GeoTransform make_gt(double ox, double oy, double pw, double ph) {
  GeoTransform gt;
  gt.origin_x = ox;
  gt.origin_y = oy;
  gt.pixel_width = pw;
  gt.pixel_height = ph;
  return gt;
}

// Land-cover grid from a row-major list of codes.
RasterGrid landcover_from(std::size_t size, const GeoTransform& gt,
                          const std::vector<std::uint16_t>& codes) {
  RasterGrid g = RasterGrid::make(size, size, 1, SampleType::U8, gt);
  REQUIRE(codes.size() == size * size);
  g.values.assign(codes.begin(), codes.end());
  return g;
}

}  // namespace

TEST_CASE("class table maps codes to supervision slots", "[geoknow]") {
  CHECK(land_cover_slot(10) == 0);
  CHECK(land_cover_slot(100) == 9);
  CHECK(land_cover_slot(0) == -1);
  CHECK(land_cover_slot(15) == -1);
  CHECK(land_cover_slot(110) == -1);

  // alphabetical order of the eight retained classes
  CHECK(active_index_for_code(80) == 0);   // artificial surfaces
  CHECK(active_index_for_code(90) == 1);   // bareland
  CHECK(active_index_for_code(10) == 2);   // cultivated land
  CHECK(active_index_for_code(20) == 3);   // forest
  CHECK(active_index_for_code(30) == 4);   // grassland
  CHECK(active_index_for_code(100) == 5);  // permanent snow
  CHECK(active_index_for_code(60) == 6);   // water bodies
  CHECK(active_index_for_code(50) == 7);   // wetland
  CHECK(active_index_for_code(40) == -1);  // shrubland, dropped
  CHECK(active_index_for_code(70) == -1);  // tundra, dropped
  for (std::size_t i = 0; i < kActiveClassCodes.size(); ++i)
    CHECK(active_index_for_code(static_cast<std::uint16_t>(kActiveClassCodes[i])) ==
          static_cast<int>(i));
}

TEST_CASE("pixel_window maps an image footprint into area pixels", "[geoknow]") {
  const GeoTransform area = make_gt(100.0, 500.0, 2.0, -2.0);
  const GeoTransform image = make_gt(164.0, 436.0, 0.5, -0.5);
  const PixelWindow w = pixel_window(image, 128, area);
  CHECK(w.left == Catch::Approx(32.0).margin(1e-12));
  CHECK(w.top == Catch::Approx(32.0).margin(1e-12));
  CHECK(w.right == Catch::Approx(64.0).margin(1e-12));
  CHECK(w.bottom == Catch::Approx(64.0).margin(1e-12));

  // fractional results must be preserved, not rounded
  const GeoTransform shifted = make_gt(164.0 + 1.2, 436.0, 0.5, -0.5);
  const PixelWindow wf = pixel_window(shifted, 128, area);
  CHECK(wf.left == Catch::Approx(32.6).margin(1e-12));
  CHECK(wf.right == Catch::Approx(64.6).margin(1e-12));
}

TEST_CASE("pixel_window agrees with corner mapping on random cases", "[geoknow]") {
  Rng rng(21);
  for (int it = 0; it < 50; ++it) {
    const double area_res = rng.uniform(0.5, 60.0);
    const GeoTransform area =
        make_gt(rng.uniform(-1e5, 1e5), rng.uniform(-1e5, 1e5), area_res, -rng.uniform(0.5, 60.0));
    const GeoTransform image = make_gt(area.origin_x + rng.uniform(0.0, 1e4),
                                       area.origin_y - rng.uniform(0.0, 1e4),
                                       rng.uniform(0.1, 8.0), -rng.uniform(0.1, 8.0));
    const std::size_t size = static_cast<std::size_t>(rng.uniform_int(1, 512));
    const PixelWindow w = pixel_window(image, size, area);

    const GeoPoint ul = forward_map(image, 0.0, 0.0);
    const GeoPoint lr = forward_map(image, static_cast<double>(size), static_cast<double>(size));
    CHECK(w.left == Catch::Approx((ul.x - area.origin_x) / area.pixel_width).margin(1e-9));
    CHECK(w.top == Catch::Approx((ul.y - area.origin_y) / area.pixel_height).margin(1e-9));
    CHECK(w.right == Catch::Approx((lr.x - area.origin_x) / area.pixel_width).margin(1e-9));
    CHECK(w.bottom == Catch::Approx((lr.y - area.origin_y) / area.pixel_height).margin(1e-9));
  }
}

TEST_CASE("round_pixel rounds halves away from zero", "[geoknow]") {
  CHECK(round_pixel(0.5) == 1);
  CHECK(round_pixel(1.5) == 2);
  CHECK(round_pixel(2.4) == 2);
  CHECK(round_pixel(-0.5) == -1);
  CHECK(round_pixel(-1.4) == -1);
}

TEST_CASE("extract_landcover rounds the window and slices half-open", "[geoknow]") {
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  RasterGrid area = RasterGrid::make(10, 10, 1, SampleType::U8, gt);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 10; ++c) area.at(0, r, c) = static_cast<std::uint16_t>(10 * r + c);

  const RasterGrid m = extract_landcover(area, PixelWindow{1.4, 1.6, 3.4, 3.6});
  REQUIRE(m.width == 2);   // cols [1, 3)
  REQUIRE(m.height == 2);  // rows [2, 4)
  CHECK(m.at(0, 0, 0) == area.at(0, 2, 1));
  CHECK(m.at(0, 1, 1) == area.at(0, 3, 2));

  try {
    extract_landcover(area, PixelWindow{-0.6, 0.0, 3.0, 3.0});
    FAIL("window sticking out left must throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::WindowOutOfBounds);
  }
  try {
    extract_landcover(area, PixelWindow{2.0, 2.0, 2.2, 9.0});  // rounds to zero width
    FAIL("degenerate window must throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::WindowOutOfBounds);
  }
  // -0.4 rounds to 0: still inside
  CHECK_NOTHROW(extract_landcover(area, PixelWindow{-0.4, 0.0, 3.0, 3.0}));
}

TEST_CASE("knowledge representation normalizes active class counts", "[geoknow]") {
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  const RasterGrid m = landcover_from(2, gt, {10, 10, 60, 80});
  const ClassHistogram hist = class_histogram(m);
  CHECK(hist.count_for_code(10) == 2);
  CHECK(hist.count_for_code(60) == 1);
  CHECK(hist.count_for_code(80) == 1);
  CHECK(hist.active_total() == 4);
  CHECK(hist.invalid == 0);

  const KnowledgeRepresentation rep = knowledge_representation(hist);
  const std::array<double, 8> expected{0.25, 0.0, 0.5, 0.0, 0.0, 0.0, 0.25, 0.0};
  for (std::size_t i = 0; i < 8; ++i) CHECK(rep.proportions[i] == expected[i]);
  CHECK(rep.is_valid());
  CHECK(argmax_label(rep) == 2);
}

TEST_CASE("dropped classes are excluded from normalization", "[geoknow]") {
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  const RasterGrid m = landcover_from(2, gt, {40, 70, 10, 10});
  const ClassHistogram hist = class_histogram(m);
  CHECK(hist.dropped_total() == 2);
  CHECK(hist.active_total() == 2);
  const KnowledgeRepresentation rep = knowledge_representation(hist);
  CHECK(rep.proportions[2] == 1.0);
  double sum = 0.0;
  for (double p : rep.proportions) sum += p;
  CHECK(sum == 1.0);
}

TEST_CASE("invalid samples: unknown codes and nodata", "[geoknow]") {
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  RasterGrid m = landcover_from(2, gt, {55, 10, 0, 30});
  m.nodata = 0.0;
  const ClassHistogram hist = class_histogram(m);
  CHECK(hist.invalid == 2);  // 55 unknown, 0 nodata
  CHECK(hist.active_total() == 2);
  const KnowledgeRepresentation rep = knowledge_representation(hist);
  CHECK(rep.proportions[2] == 0.5);
  CHECK(rep.proportions[4] == 0.5);
}

TEST_CASE("all-invalid grid raises NoSupportedClasses", "[geoknow]") {
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  const RasterGrid m = landcover_from(2, gt, {40, 70, 40, 70});
  try {
    knowledge_representation(class_histogram(m));
    FAIL("expected NoSupportedClasses");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NoSupportedClasses);
  }
}

TEST_CASE("class_histogram wants a single band", "[geoknow]") {
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  const RasterGrid rgb = RasterGrid::make(2, 2, 3, SampleType::U8, gt);
  try {
    class_histogram(rgb);
    FAIL("expected NotLandCover");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NotLandCover);
  }
}

TEST_CASE("proportions sum to one on random grids", "[geoknow]") {
  Rng rng(77);
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  for (int it = 0; it < 50; ++it) {
    const std::size_t size = static_cast<std::size_t>(rng.uniform_int(1, 24));
    RasterGrid m = RasterGrid::make(size, size, 1, SampleType::U8, gt);
    bool any_active = false;
    for (auto& v : m.values) {
      v = static_cast<std::uint16_t>(rng.uniform_int(0, 11) * 10);  // 0..110
      if (active_index_for_code(v) >= 0) any_active = true;
    }
    if (!any_active) continue;
    const KnowledgeRepresentation rep = knowledge_representation(class_histogram(m));
    double sum = 0.0;
    for (double p : rep.proportions) {
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("argmax_label breaks ties toward the smaller index", "[geoknow]") {
  const GeoTransform gt = make_gt(0.0, 0.0, 1.0, -1.0);
  // equal counts of artificial surfaces (index 0) and cultivated land (index 2)
  const RasterGrid m = landcover_from(2, gt, {80, 10, 80, 10});
  const KnowledgeRepresentation rep = knowledge_representation(class_histogram(m));
  CHECK(rep.proportions[0] == 0.5);
  CHECK(rep.proportions[2] == 0.5);
  CHECK(argmax_label(rep) == 0);
}

TEST_CASE("locate_area picks the smallest hosting area id", "[geoknow]") {
  AreaIndex index;
  const GeoTransform big = make_gt(0.0, 1000.0, 10.0, -10.0);
  index.add(7, std::make_shared<RasterGrid>(testutil::uniform_landcover(100, big, 20)));
  index.add(3, std::make_shared<RasterGrid>(testutil::uniform_landcover(100, big, 30)));

  const GeoTransform image = make_gt(100.0, 900.0, 1.0, -1.0);
  const AreaEntry& e = locate_area(index, image, 64);
  CHECK(e.area_id == 3);

  const GeoTransform outside = make_gt(-5000.0, 900.0, 1.0, -1.0);
  try {
    locate_area(index, outside, 64);
    FAIL("expected NoHostingArea");
  } catch (const Error& e2) {
    CHECK(e2.code() == Errc::NoHostingArea);
  }

  AreaIndex empty;
  CHECK_THROWS_AS(locate_area(empty, image, 64), std::invalid_argument);
}

TEST_CASE("area index manifest round-trips", "[geoknow]") {
  TempDir dir;
  const GeoTransform gt = make_gt(500.0, 800.0, 4.0, -4.0);
  const RasterGrid area = testutil::uniform_landcover(50, gt, 60);
  write_raster(area, dir / "lc0");

  AreaIndex index;
  index.add(0, std::make_shared<RasterGrid>(area), (dir / "lc0.rhdr").string());
  index.write_manifest(dir / "index.json");

  const AreaIndex back = AreaIndex::from_manifest(dir / "index.json");
  REQUIRE(back.entries.size() == 1);
  CHECK(back.entries[0].area_id == 0);
  CHECK(back.entries[0].bounds.min_x == Catch::Approx(500.0));
  CHECK(back.entries[0].bounds.max_x == Catch::Approx(700.0));
  REQUIRE(back.entries[0].grid != nullptr);
  CHECK(*back.entries[0].grid == area);

  // metadata-only load keeps the grid unset
  const AreaIndex lazy = AreaIndex::from_manifest(dir / "index.json", false);
  CHECK(lazy.entries[0].grid == nullptr);

  testutil::spit(dir / "dup.json",
                 "[{\"area_id\":1,\"raster\":\"lc0.rhdr\",\"bounds\":[500,600,700,800]},"
                 "{\"area_id\":1,\"raster\":\"lc0.rhdr\",\"bounds\":[500,600,700,800]}]");
  try {
    AreaIndex::from_manifest(dir / "dup.json");
    FAIL("expected MalformedHeader for duplicate area ids");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MalformedHeader);
  }
}

TEST_CASE("supervise_image composes the full extraction", "[geoknow]") {
  // area at 2 units/px holding a forest patch in the north-west quadrant
  const GeoTransform area_gt = make_gt(0.0, 200.0, 2.0, -2.0);
  RasterGrid area = testutil::uniform_landcover(100, area_gt, 30);
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t c = 0; c < 50; ++c) area.at(0, r, c) = 20;

  AreaIndex index;
  index.add(0, std::make_shared<RasterGrid>(area));

  // image spanning the whole north-west quadrant exactly: pure forest
  const GeoTransform img_nw = make_gt(0.0, 200.0, 1.0, -1.0);
  const KnowledgeRepresentation nw = supervise_image(index, img_nw, 100);
  CHECK(nw.proportions[3] == 1.0);
  CHECK(argmax_label(nw) == 3);

  // image spanning the north half: 50/50 forest vs grassland
  const GeoTransform img_n = make_gt(0.0, 200.0, 2.0, -1.0);
  const KnowledgeRepresentation north = supervise_image(index, img_n, 100);
  CHECK(north.proportions[3] == 0.5);
  CHECK(north.proportions[4] == 0.5);

  // image hanging past the east edge of the only area
  const GeoTransform img_out = make_gt(150.0, 200.0, 1.0, -1.0);
  try {
    supervise_image(index, img_out, 100);
    FAIL("expected NoHostingArea");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NoHostingArea);
  }
}

TEST_CASE("supervise_image loads area rasters lazily from disk", "[geoknow]") {
  TempDir dir;
  const GeoTransform gt = make_gt(0.0, 100.0, 1.0, -1.0);
  write_raster(testutil::uniform_landcover(100, gt, 50), dir / "wet");
  AreaIndex index;
  index.add(4, std::make_shared<RasterGrid>(testutil::uniform_landcover(100, gt, 50)),
            (dir / "wet.rhdr").string());
  index.entries[0].grid = nullptr;  // force the lazy path
  const KnowledgeRepresentation rep = supervise_image(index, make_gt(10.0, 90.0, 1.0, -1.0), 20);
  CHECK(rep.proportions[7] == 1.0);
}
