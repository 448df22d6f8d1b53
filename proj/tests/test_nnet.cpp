#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <geokr/nnet.hpp>

#include "test_util.hpp"

using namespace geokr;
using testutil::TempDir;

namespace {

std::array<double, kActiveClassCount> random_simplex(Rng& rng) {
  std::array<double, kActiveClassCount> a{};
  double total = 0.0;
  for (double& v : a) {
    v = rng.uniform(0.01, 1.0);
    total += v;
  }
  for (double& v : a) v /= total;
  return a;
}

Tensor<double> random_probs(Rng& rng, std::size_t batch) {
  Tensor<double> probs = Tensor<double>::zeros({batch, kActiveClassCount});
  for (std::size_t n = 0; n < batch; ++n) {
    const auto row = random_simplex(rng);
    for (std::size_t j = 0; j < kActiveClassCount; ++j) probs.at2(n, j) = row[j];
  }
  return probs;
}

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.in_channels = 2;
  cfg.height = 6;
  cfg.width = 6;
  cfg.stages = {{4, 3, 2}, {8, 3, 2}};
  return cfg;
}

}  // namespace

TEST_CASE("softmax of a single lifted logit", "[nnet]") {
  Tensor<double> logits = Tensor<double>::zeros({1, 8});
  logits.at2(0, 0) = std::log(2.0);
  const Tensor<double> probs = softmax_batch(logits);
  CHECK(probs.at2(0, 0) == Catch::Approx(2.0 / 9.0).margin(1e-15));
  for (std::size_t j = 1; j < 8; ++j)
    CHECK(probs.at2(0, j) == Catch::Approx(1.0 / 9.0).margin(1e-15));

  SECTION("rows sum to one under extreme logits") {
    Tensor<double> hot = Tensor<double>::zeros({1, 8});
    hot.at2(0, 3) = 1000.0;
    hot.at2(0, 5) = -1000.0;
    const Tensor<double> p = softmax_batch(hot);
    double total = 0.0;
    for (std::size_t j = 0; j < 8; ++j) total += p.at2(0, j);
    CHECK(total == Catch::Approx(1.0).margin(1e-12));
    CHECK(p.at2(0, 3) == Catch::Approx(1.0));
  }

  SECTION("rank is checked") {
    try {
      softmax_batch(Tensor<double>::zeros({2, 2, 2}));
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ShapeMismatch);
    }
  }
}

TEST_CASE("supervised loss matches a hand-computed value", "[nnet]") {
  Tensor<double> probs = Tensor<double>::zeros({1, 8});
  probs.at2(0, 0) = 0.25;
  probs.at2(0, 1) = 0.75;
  std::vector<std::array<double, kActiveClassCount>> targets(1);
  targets[0] = {0.5, 0.5, 0, 0, 0, 0, 0, 0};

  CHECK(loss_supervised(probs, targets) == Catch::Approx(0.8369882167858358).margin(1e-15));
  CHECK(entropy(targets[0]) == Catch::Approx(0.6931471805599453).margin(1e-15));
  CHECK(loss_kl(probs, targets) == Catch::Approx(0.1438410362258905).margin(1e-15));

  SECTION("gradient of the supervised loss") {
    Tensor<double> d;
    loss_supervised(probs, targets, &d);
    CHECK(d.at2(0, 0) == Catch::Approx(-0.5 / 0.25).margin(1e-15));
    CHECK(d.at2(0, 1) == Catch::Approx(-0.5 / 0.75).margin(1e-15));
    CHECK(d.at2(0, 2) == 0.0);
  }

  SECTION("zero target entries contribute nothing even at zero probability") {
    probs.at2(0, 2) = 0.0;
    CHECK(std::isfinite(loss_supervised(probs, targets)));
  }

  SECTION("batch averaging") {
    Tensor<double> two = Tensor<double>::zeros({2, 8});
    for (std::size_t j = 0; j < 8; ++j) {
      two.at2(0, j) = probs.at2(0, j);
      two.at2(1, j) = probs.at2(0, j);
    }
    std::vector<std::array<double, kActiveClassCount>> twice = {targets[0], targets[0]};
    CHECK(loss_supervised(two, twice) == Catch::Approx(loss_supervised(probs, targets)));
  }
}

TEST_CASE("relative-entropy loss is the supervised loss minus the target entropy", "[nnet]") {
  Rng rng(991);
  for (int trial = 0; trial < 1000; ++trial) {
    Tensor<double> probs = random_probs(rng, 1);
    std::vector<std::array<double, kActiveClassCount>> targets = {random_simplex(rng)};

    Tensor<double> ds, dk;
    const double ls = loss_supervised(probs, targets, &ds);
    const double lk = loss_kl(probs, targets, &dk);
    REQUIRE(std::abs(lk - (ls - entropy(targets[0]))) < 1e-9);
    for (std::size_t j = 0; j < kActiveClassCount; ++j)
      REQUIRE(std::abs(ds.at2(0, j) - dk.at2(0, j)) < 1e-9);
  }
}

TEST_CASE("consistency loss and its gradient", "[nnet]") {
  Tensor<double> student = Tensor<double>::zeros({1, 8});
  student.at2(0, 0) = 1.0;
  Tensor<double> teacher = Tensor<double>::zeros({1, 8});
  teacher.at2(0, 0) = 2.0 / 9.0;
  for (std::size_t j = 1; j < 8; ++j) teacher.at2(0, j) = 1.0 / 9.0;

  Tensor<double> d;
  CHECK(loss_consistency(student, teacher, &d) == Catch::Approx(1.5040773967762742).margin(1e-15));
  // gradient w.r.t. the student is -ln T, independent of the student itself
  CHECK(d.at2(0, 0) == Catch::Approx(-std::log(2.0 / 9.0)).margin(1e-15));
  CHECK(d.at2(0, 5) == Catch::Approx(-std::log(1.0 / 9.0)).margin(1e-15));

  SECTION("shape mismatch") {
    try {
      loss_consistency(student, Tensor<double>::zeros({2, 8}));
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ShapeMismatch);
    }
  }
}

TEST_CASE("softmax chain on one-hot targets gives probs minus one-hot", "[nnet]") {
  Rng rng(17);
  const std::size_t batch = 4;
  Tensor<double> logits = Tensor<double>::zeros({batch, 8});
  for (double& v : logits.data) v = rng.normal(0.0, 1.5);
  const Tensor<double> probs = softmax_batch(logits);

  std::vector<std::array<double, kActiveClassCount>> targets(batch);
  std::vector<std::size_t> hot = {0, 3, 7, 3};
  for (std::size_t n = 0; n < batch; ++n) targets[n][hot[n]] = 1.0;

  Tensor<double> dprobs;
  loss_supervised(probs, targets, &dprobs);
  const Tensor<double> dlogits = chain_softmax(probs, dprobs);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t j = 0; j < 8; ++j) {
      const double expected = (probs.at2(n, j) - (j == hot[n] ? 1.0 : 0.0)) / batch;
      REQUIRE(dlogits.at2(n, j) == Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("encoder forward shapes and pooling", "[nnet]") {
  EncoderConfig cfg;
  cfg.height = cfg.width = 32;
  const auto dims = cfg.stage_dims();
  REQUIRE(dims.size() == 3);
  CHECK(dims[0] == std::make_pair<std::size_t, std::size_t>(16, 16));
  CHECK(dims[1] == std::make_pair<std::size_t, std::size_t>(8, 8));
  CHECK(dims[2] == std::make_pair<std::size_t, std::size_t>(4, 4));
  CHECK(cfg.representation_dim() == 64);

  Rng rng(3);
  const auto params = init_parameters<float>(cfg, rng);
  Tensor<float> input = Tensor<float>::zeros({2, 3, 32, 32});
  for (float& v : input.data) v = static_cast<float>(rng.uniform());
  const ForwardTrace<float> trace = forward_batch(cfg, params, input);
  CHECK(trace.evaluated);
  REQUIRE(trace.activations.size() == 3);
  CHECK(trace.activations[2].shape == std::vector<std::size_t>{2, 64, 4, 4});
  CHECK(trace.pooled.shape == std::vector<std::size_t>{2, 64});
  CHECK(trace.logits.shape == std::vector<std::size_t>{2, 8});

  SECTION("wrong input size") {
    try {
      forward_batch(cfg, params, Tensor<float>::zeros({1, 3, 16, 32}));
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ShapeMismatch);
    }
  }
}

TEST_CASE("pointwise convolution forward is hand-checkable", "[nnet]") {
  EncoderConfig cfg;
  cfg.in_channels = 1;
  cfg.height = cfg.width = 2;
  cfg.stages = {{1, 1, 1}};
  Rng rng(1);
  ParameterSet<double> params = init_parameters<double>(cfg, rng);
  params.find("stage0.weight").value = {2.0};
  params.find("stage0.bias").value = {0.5};
  auto& fcw = params.find("fc.weight").value;
  std::fill(fcw.begin(), fcw.end(), 0.0);
  for (std::size_t k = 0; k < 8; ++k) fcw[k] = static_cast<double>(k);
  std::fill(params.find("fc.bias").value.begin(), params.find("fc.bias").value.end(), 0.0);
  params.find("fc.bias").value[0] = -1.0;

  Tensor<double> input = Tensor<double>::zeros({1, 1, 2, 2});
  input.data = {1.0, 2.0, 3.0, 4.0};
  const auto trace = forward_batch(cfg, params, input);
  // conv: 2x + 0.5 -> {2.5, 4.5, 6.5, 8.5}; pooled mean 5.5
  CHECK(trace.activations[0].data == std::vector<double>{2.5, 4.5, 6.5, 8.5});
  CHECK(trace.pooled.at2(0, 0) == 5.5);
  CHECK(trace.logits.at2(0, 0) == -1.0);
  CHECK(trace.logits.at2(0, 3) == Catch::Approx(16.5));
}

TEST_CASE("3x3 convolution pads with zeros", "[nnet]") {
  EncoderConfig cfg;
  cfg.in_channels = 1;
  cfg.height = cfg.width = 3;
  cfg.stages = {{1, 3, 1}};
  Rng rng(1);
  ParameterSet<double> params = init_parameters<double>(cfg, rng);
  std::fill(params.find("stage0.weight").value.begin(), params.find("stage0.weight").value.end(),
            1.0);
  params.find("stage0.bias").value = {0.0};

  Tensor<double> ones = Tensor<double>::zeros({1, 1, 3, 3});
  std::fill(ones.data.begin(), ones.data.end(), 1.0);
  const auto trace = forward_batch(cfg, params, ones);
  // corners see 4 in-bounds taps, edges 6, center all 9
  CHECK(trace.activations[0].data ==
        std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
  CHECK(trace.pooled.at2(0, 0) == Catch::Approx(49.0 / 9.0));
}

TEST_CASE("analytic gradients agree with central differences", "[nnet]") {
  const EncoderConfig cfg = tiny_config();
  Rng rng(2024);
  ParameterSet<double> params = init_parameters<double>(cfg, rng);
  REQUIRE(params.total_count() >= 200);
  // Zero biases on a tiny map can leave a pre-activation exactly on the ReLU
  // corner, where central differences see a one-sided slope the analytic
  // gradient legitimately reports as zero. Evaluate at a smooth point instead.
  for (const char* name : {"stage0.bias", "stage1.bias"})
    for (double& b : params.find(name).value) b = 0.05;

  Tensor<double> input = Tensor<double>::zeros({2, 2, 6, 6});
  for (double& v : input.data) v = rng.uniform(0.0, 1.0);
  std::vector<std::array<double, kActiveClassCount>> targets = {random_simplex(rng),
                                                                random_simplex(rng)};

  Rng pick(7);
  const GradCheckReport report =
      finite_diff_check(cfg, params, input, targets, 250, pick);
  INFO("worst " << report.worst_param << "[" << report.worst_index << "] analytic "
                << report.worst_analytic << " numeric " << report.worst_numeric);
  CHECK(report.checked == 250);
  // Central differences at eps=1e-5 carry ~1e-6 relative roundoff on
  // small-magnitude coordinates; 1e-5 still sits three decades below the
  // planted-bug signal asserted further down.
  CHECK(report.max_rel_err < 1e-5);

  SECTION("a planted gradient bug is flagged") {
    Rng pick2(7);
    const GradCheckReport bad =
        finite_diff_check(cfg, params, input, targets, 250, pick2, 1e-5, "fc.weight", 3.0);
    CHECK(bad.max_rel_err > 1e-2);
    CHECK(bad.worst_param == "fc.weight");
  }
}

TEST_CASE("gradient bookkeeping errors", "[nnet]") {
  const EncoderConfig cfg = tiny_config();
  Rng rng(5);
  ParameterSet<double> params = init_parameters<double>(cfg, rng);

  SECTION("stepping without gradients") {
    try {
      sgd_step(params, 0.1);
      FAIL("expected MissingGradients");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::MissingGradients);
    }
  }

  SECTION("backward without forward") {
    ForwardTrace<double> blank;
    try {
      backward_batch(cfg, params, blank, Tensor<double>::zeros({1, 8}));
      FAIL("expected GraphNotEvaluated");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::GraphNotEvaluated);
    }
  }

  SECTION("sgd consumes the gradients") {
    Tensor<double> input = Tensor<double>::zeros({1, 2, 6, 6});
    for (double& v : input.data) v = rng.uniform();
    const auto trace = forward_batch(cfg, params, input);
    Tensor<double> dprobs;
    const Tensor<double> probs = softmax_batch(trace.logits);
    std::vector<std::array<double, kActiveClassCount>> targets = {random_simplex(rng)};
    loss_supervised(probs, targets, &dprobs);
    backward_batch(cfg, params, trace, chain_softmax(probs, dprobs));
    REQUIRE(params.has_grads);
    sgd_step(params, 0.1);
    CHECK_FALSE(params.has_grads);
  }
}

TEST_CASE("initialization is deterministic and shaped correctly", "[nnet]") {
  const EncoderConfig cfg = tiny_config();
  Rng a(42), b(42), c(43);
  const auto pa = init_parameters<float>(cfg, a);
  const auto pb = init_parameters<float>(cfg, b);
  const auto pc = init_parameters<float>(cfg, c);

  REQUIRE(pa.params.size() == 6);
  CHECK(pa.params[0].name == "stage0.weight");
  CHECK(pa.params[0].shape == std::vector<std::size_t>{4, 2, 3, 3});
  CHECK(pa.params[1].name == "stage0.bias");
  CHECK(pa.params[4].name == "fc.weight");
  CHECK(pa.params[4].shape == std::vector<std::size_t>{8, 8});
  CHECK(pa.total_count() == 72 + 4 + 288 + 8 + 64 + 8);

  for (std::size_t i = 0; i < pa.params.size(); ++i)
    CHECK(pa.params[i].value == pb.params[i].value);
  CHECK(pa.params[0].value != pc.params[0].value);

  for (float v : pa.params[1].value) CHECK(v == 0.0f);
  for (float v : pa.params[5].value) CHECK(v == 0.0f);
}

TEST_CASE("checkpoints round-trip and reject mismatches", "[nnet]") {
  TempDir dir;
  const EncoderConfig cfg = tiny_config();
  Rng rng(77);
  const auto params = init_parameters<float>(cfg, rng);
  nlohmann::ordered_json meta;
  meta["mode"] = "classification";
  meta["step"] = 12;
  save_checkpoint(dir / "model", cfg, params, meta);

  SECTION("values and config survive") {
    const auto ck = load_checkpoint<float>(dir / "model");
    CHECK(ck.encoder == cfg);
    CHECK(ck.meta.at("mode") == "classification");
    REQUIRE(ck.params.params.size() == params.params.size());
    for (std::size_t i = 0; i < params.params.size(); ++i) {
      CHECK(ck.params.params[i].name == params.params[i].name);
      CHECK(ck.params.params[i].value == params.params[i].value);
    }
  }

  SECTION("either artifact name works as the base") {
    CHECK_NOTHROW(load_checkpoint<float>(dir / "model.ck.json"));
    CHECK_NOTHROW(load_checkpoint<float>(dir / "model.ck.blob"));
  }

  SECTION("precision must match") {
    try {
      load_checkpoint<double>(dir / "model");
      FAIL("expected ArchitectureMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ArchitectureMismatch);
    }
  }

  SECTION("truncated blob") {
    const std::filesystem::path blob = dir / "model.ck.blob";
    std::filesystem::resize_file(blob, std::filesystem::file_size(blob) - 4);
    try {
      load_checkpoint<float>(dir / "model");
      FAIL("expected SizeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::SizeMismatch);
    }
  }

  SECTION("wrong format tag") {
    testutil::spit(dir / "model.ck.json", "{\"format\": \"something-else\"}\n");
    try {
      load_checkpoint<float>(dir / "model");
      FAIL("expected MalformedHeader");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::MalformedHeader);
    }
  }
}

TEST_CASE("encoder config is validated", "[nnet]") {
  EncoderConfig cfg = tiny_config();

  SECTION("even kernels are rejected") {
    cfg.stages[0].kernel = 4;
    try {
      cfg.validate();
      FAIL("expected InvalidConfig");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::InvalidConfig);
    }
  }

  SECTION("zero stride is rejected") {
    cfg.stages[1].stride = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
  }

  SECTION("no stages is rejected") {
    cfg.stages.clear();
    CHECK_THROWS_AS(cfg.validate(), Error);
  }

  SECTION("json round trip") {
    const nlohmann::ordered_json j = cfg.to_json();
    const EncoderConfig back = EncoderConfig::from_json(j);
    CHECK(back == cfg);
    CHECK(j.at("stages").size() == 2);
  }

  SECTION("missing keys raise a header error") {
    try {
      EncoderConfig::from_json(nlohmann::json{{"in_channels", 3}});
      FAIL("expected MalformedHeader");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::MalformedHeader);
    }
  }
}
