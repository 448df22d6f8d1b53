// geokr: land-cover supervision extraction, dataset ingest, mean-teacher
// pre-training and change analysis behind one executable.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <geokr/geokr.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

bool log_enabled() {
  const char* v = std::getenv("GEOKR_LOG");
  return v != nullptr && std::string(v) != "" && std::string(v) != "quiet";
}

void print_effective_config(const std::string& name, const ordered_json& cfg) {
  std::cerr << "[geokr] " << name << " config " << cfg.dump() << "\n";
}

void debug_log(const std::string& msg) {
  if (log_enabled()) std::cerr << "[geokr] " << msg << "\n";
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) geokr::raise(geokr::Errc::SourceUnreadable, "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    geokr::raise(geokr::Errc::MalformedHeader, path.string() + ": " + e.what());
  }
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) geokr::raise(geokr::Errc::SourceUnreadable, "cannot write " + path.string());
  out << text;
}

std::vector<fs::path> scan_scene_headers(const fs::path& dir) {
  if (!fs::is_directory(dir))
    geokr::raise(geokr::Errc::SourceUnreadable, dir.string() + " is not a directory");
  std::vector<fs::path> headers;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".rhdr")
      headers.push_back(entry.path());
  std::sort(headers.begin(), headers.end());
  return headers;
}

// --old/--new accept either a tile manifest (JSON Lines) or a plain JSON
// proportion vector; disambiguated by content.
struct ChangeInput {
  std::optional<geokr::ClassVector> proportions;
  std::vector<geokr::TileRecord> records;
  bool is_manifest() const { return !proportions.has_value(); }
  geokr::ClassVector resolve() const {
    return proportions ? *proportions : geokr::mean_proportions(records);
  }
};

ChangeInput load_change_input(const fs::path& path) {
  ChangeInput input;
  std::ifstream in(path);
  if (!in) geokr::raise(geokr::Errc::SourceUnreadable, "cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json parsed = json::parse(text, nullptr, false);
  if (!parsed.is_discarded()) {
    const json* vec = nullptr;
    if (parsed.is_array() && parsed.size() == geokr::kActiveClassCount)
      vec = &parsed;
    else if (parsed.is_object() && parsed.contains("proportions"))
      vec = &parsed.at("proportions");
    if (vec != nullptr) {
      geokr::ClassVector p{};
      for (std::size_t i = 0; i < geokr::kActiveClassCount; ++i) p[i] = vec->at(i).get<double>();
      input.proportions = p;
      return input;
    }
  }
  input.records = geokr::read_manifest(path);
  return input;
}

template <typename T>
int run_pretrain_typed(const geokr::TrainConfig& cfg, const fs::path& manifest,
                       const fs::path& scenes, std::size_t tile_size, const fs::path& out_dir) {
  const geokr::TrainingSet<T> set = geokr::load_training_set<T>(manifest, scenes, tile_size);
  debug_log("loaded " + std::to_string(set.size()) + " tiles");
  const geokr::TrainSummary summary = geokr::run_pretraining<T>(cfg, set, out_dir);
  ordered_json out;
  out["steps"] = summary.steps;
  out["epochs"] = summary.epochs;
  out["final_loss_s"] = summary.last.loss_s;
  out["final_loss_t"] = summary.last.loss_t;
  out["final_loss_total"] = summary.last.loss_total;
  out["export"] = summary.export_path.string();
  std::cout << out.dump(2) << "\n";
  return 0;
}

template <typename T>
int run_probe_typed(const std::string& checkpoint, bool random_init, std::uint64_t init_seed,
                    const geokr::TrainConfig& tcfg, const fs::path& manifest, const fs::path& scenes,
                    std::size_t tile_size, const geokr::ProbeConfig& pcfg, const std::string& out_file) {
  const geokr::TrainingSet<T> set = geokr::load_training_set<T>(manifest, scenes, tile_size);
  geokr::EncoderConfig encoder;
  geokr::ParameterSet<T> params;
  if (random_init) {
    encoder.in_channels = set.channels;
    encoder.height = tile_size;
    encoder.width = tile_size;
    encoder.stages = tcfg.stages;
    encoder.output_dim = geokr::kActiveClassCount;
    geokr::Rng rng(init_seed);
    params = geokr::init_parameters<T>(encoder, rng);
  } else {
    geokr::Checkpoint<T> ck = geokr::load_checkpoint<T>(checkpoint);
    encoder = ck.encoder;
    params = std::move(ck.params);
    if (encoder.height != tile_size || encoder.width != tile_size ||
        encoder.in_channels != set.channels)
      geokr::raise(geokr::Errc::ArchitectureMismatch,
                   "checkpoint expects " + std::to_string(encoder.height) + "px tiles, data has " +
                       std::to_string(tile_size));
  }
  const geokr::ProbeResult result = geokr::linear_probe(encoder, params, set, pcfg);
  const std::string payload = result.to_json().dump(2) + "\n";
  if (!out_file.empty())
    write_text(out_file, payload);
  else
    std::cout << payload;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geographical-knowledge representation pipeline"};
  app.require_subcommand(1);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate synthetic scenes and land-cover products");
  std::string synth_out, synth_config;
  std::optional<std::uint64_t> synth_seed;
  std::optional<std::size_t> synth_scenes, synth_scene_size, synth_block_size;
  std::optional<double> synth_noise_rate;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--config", synth_config, "generator config (JSON)");
  synth->add_option("--seed", synth_seed, "seed override");
  synth->add_option("--scenes", synth_scenes, "scene count override");
  synth->add_option("--scene-size", synth_scene_size, "scene size override (pixels)");
  synth->add_option("--block-size", synth_block_size, "mosaic block size override (pixels)");
  synth->add_option("--label-noise", synth_noise_rate, "label noise rate override");

  // ---- supervise ----
  auto* supervise = app.add_subcommand("supervise", "derive the class-proportion vector for one image");
  std::string sup_image, sup_index;
  std::optional<std::size_t> sup_size;
  supervise->add_option("--image", sup_image, "image raster header (.rhdr)")->required();
  supervise->add_option("--area-index", sup_index, "land-cover area index (JSON)")->required();
  supervise->add_option("--size", sup_size, "window size in image pixels (default: image width)");

  // ---- ingest ----
  auto* ingest = app.add_subcommand("ingest", "tile, filter and supervise a scene directory");
  std::string ing_scenes, ing_index, ing_out, ing_config;
  unsigned ing_workers = 1;
  std::optional<std::size_t> ing_tile;
  std::optional<double> ing_overlap;
  ingest->add_option("--scenes", ing_scenes, "directory of scene rasters")->required();
  ingest->add_option("--area-index", ing_index, "land-cover area index (JSON)")->required();
  ingest->add_option("--out", ing_out, "manifest output path (JSON Lines)")->required();
  ingest->add_option("--config", ing_config, "ingest config (JSON)");
  ingest->add_option("--workers", ing_workers, "worker thread count");
  ingest->add_option("--tile-size", ing_tile, "tile size override");
  ingest->add_option("--overlap", ing_overlap, "overlap rate override");

  // ---- pretrain ----
  auto* pretrain = app.add_subcommand("pretrain", "run representation pre-training from a manifest");
  std::string pre_manifest, pre_scenes, pre_out, pre_config, pre_mode, pre_precision, pre_export;
  std::size_t pre_tile = 64;
  std::optional<std::uint64_t> pre_seed;
  std::optional<std::size_t> pre_epochs, pre_batch;
  pretrain->add_option("--manifest", pre_manifest, "tile manifest")->required();
  pretrain->add_option("--scenes", pre_scenes, "directory of scene rasters")->required();
  pretrain->add_option("--out", pre_out, "output directory")->required();
  pretrain->add_option("--tile-size", pre_tile, "tile size in pixels")->required();
  pretrain->add_option("--config", pre_config, "training config (JSON)");
  pretrain->add_option("--mode", pre_mode, "classification|representation|mean_teacher");
  pretrain->add_option("--precision", pre_precision, "f32|f64");
  pretrain->add_option("--export", pre_export, "student|teacher");
  pretrain->add_option("--seed", pre_seed, "seed override");
  pretrain->add_option("--epochs", pre_epochs, "epoch override");
  pretrain->add_option("--batch-size", pre_batch, "batch size override");

  // ---- analyze-change ----
  auto* analyze = app.add_subcommand("analyze-change", "compare class proportions between two epochs");
  std::string an_old, an_new, an_format = "json", an_out;
  analyze->add_option("--old", an_old, "older manifest or proportion vector (JSON)")->required();
  analyze->add_option("--new", an_new, "newer manifest or proportion vector (JSON)")->required();
  analyze->add_option("--format", an_format, "json|text")->check(CLI::IsMember({"json", "text"}));
  analyze->add_option("--out", an_out, "write the report here instead of stdout");

  // ---- probe ----
  auto* probe = app.add_subcommand("probe", "linear-probe a frozen encoder checkpoint");
  std::string pr_checkpoint, pr_manifest, pr_scenes, pr_config, pr_precision = "f32", pr_out;
  std::size_t pr_tile = 64, pr_seeds = 3, pr_epochs = 200;
  double pr_lr = 1e-2, pr_holdout = 0.25;
  bool pr_random = false;
  std::uint64_t pr_seed = 1234;
  probe->add_option("--checkpoint", pr_checkpoint, "checkpoint base path");
  probe->add_flag("--random-init", pr_random, "probe a freshly initialized encoder instead");
  probe->add_option("--manifest", pr_manifest, "labeled tile manifest")->required();
  probe->add_option("--scenes", pr_scenes, "directory of scene rasters")->required();
  probe->add_option("--tile-size", pr_tile, "tile size in pixels")->required();
  probe->add_option("--config", pr_config, "training config (JSON), for --random-init stages");
  probe->add_option("--precision", pr_precision, "f32|f64")->check(CLI::IsMember({"f32", "f64"}));
  probe->add_option("--seeds", pr_seeds, "number of probe seeds");
  probe->add_option("--seed", pr_seed, "initialization seed for --random-init");
  probe->add_option("--lr", pr_lr, "probe learning rate");
  probe->add_option("--epochs", pr_epochs, "probe epochs");
  probe->add_option("--holdout", pr_holdout, "held-out fraction");
  probe->add_option("--out", pr_out, "write the result here instead of stdout");

  // ---- gradcheck ----
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of the gradients");
  std::string gc_config, gc_precision = "f64", gc_mutate;
  std::size_t gc_samples = 200, gc_batch = 2, gc_tile = 32;
  std::uint64_t gc_seed = 4242;
  double gc_tolerance = 1e-4, gc_mutate_scale = 3.0;
  gradcheck->add_option("--config", gc_config, "training config (JSON), for the encoder stages");
  gradcheck->add_option("--precision", gc_precision, "f32|f64")->check(CLI::IsMember({"f32", "f64"}));
  gradcheck->add_option("--samples", gc_samples, "parameter coordinates to sample");
  gradcheck->add_option("--batch", gc_batch, "batch size of the audit input");
  gradcheck->add_option("--tile-size", gc_tile, "input size in pixels");
  gradcheck->add_option("--seed", gc_seed, "seed");
  gradcheck->add_option("--tolerance", gc_tolerance, "maximum accepted relative error");
  gradcheck->add_option("--mutate", gc_mutate, "corrupt this parameter's gradient before checking");
  gradcheck->add_option("--mutate-scale", gc_mutate_scale, "corruption factor for --mutate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) {
      geokr::SynthConfig cfg;
      if (!synth_config.empty()) cfg = geokr::SynthConfig::from_json(read_json_file(synth_config));
      if (synth_seed) cfg.seed = *synth_seed;
      if (synth_scenes) cfg.scenes = *synth_scenes;
      if (synth_scene_size) cfg.scene_size = *synth_scene_size;
      if (synth_block_size) cfg.block_size = *synth_block_size;
      if (synth_noise_rate) cfg.label_noise_rate = *synth_noise_rate;
      cfg.validate();
      print_effective_config("synth", cfg.to_json());
      const geokr::SynthResult result = geokr::synth_generate(cfg, synth_out);
      ordered_json out;
      out["scenes"] = result.scenes.size();
      out["total_blocks"] = result.total_blocks;
      out["total_flipped"] = result.total_flipped;
      out["scenes_dir"] = result.scenes_dir.string();
      out["area_index"] = result.area_index_noisy.string();
      out["area_index_clean"] = result.area_index_clean.string();
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (supervise->parsed()) {
      ordered_json cfg;
      cfg["image"] = sup_image;
      cfg["area_index"] = sup_index;
      const geokr::RasterGrid image = geokr::read_raster(sup_image);
      std::size_t size = sup_size.value_or(image.width);
      if (!sup_size && image.width != image.height)
        geokr::raise(geokr::Errc::NonSquareTile,
                     "image is not square; pass --size to choose the window");
      cfg["size"] = size;
      print_effective_config("supervise", cfg);
      const geokr::AreaIndex index = geokr::AreaIndex::from_manifest(sup_index);
      const geokr::AreaEntry& area = geokr::locate_area(index, image.geotransform, size);
      const geokr::KnowledgeRepresentation rep =
          geokr::supervise_image(index, image.geotransform, size);
      const int label = geokr::argmax_label(rep);
      ordered_json out;
      out["area_id"] = area.area_id;
      out["representation"] = rep.proportions;
      out["label"] = label;
      out["class"] = geokr::kActiveClassNames[static_cast<std::size_t>(label)];
      std::cout << out.dump(2) << "\n";
      return 0;
    }

    if (ingest->parsed()) {
      geokr::IngestConfig cfg;
      if (!ing_config.empty()) cfg = geokr::IngestConfig::from_json(read_json_file(ing_config));
      if (ing_tile) cfg.tile_size = *ing_tile;
      if (ing_overlap) cfg.overlap_rate = *ing_overlap;
      cfg.validate();
      ordered_json eff = cfg.to_json();
      eff["workers"] = ing_workers;
      print_effective_config("ingest", eff);
      const geokr::AreaIndex index = geokr::AreaIndex::from_manifest(ing_index);
      const std::vector<fs::path> scenes = scan_scene_headers(ing_scenes);
      debug_log("ingesting " + std::to_string(scenes.size()) + " scenes");
      const geokr::IngestSummary summary =
          geokr::build_manifest(scenes, index, cfg, ing_out, ing_workers);
      std::cout << summary.to_json().dump(2) << "\n";
      return 0;
    }

    if (pretrain->parsed()) {
      geokr::TrainConfig cfg;
      if (!pre_config.empty()) cfg = geokr::TrainConfig::from_json(read_json_file(pre_config));
      if (!pre_mode.empty()) cfg.mode = geokr::train_mode_from(pre_mode);
      if (!pre_precision.empty()) cfg.precision = geokr::precision_from(pre_precision);
      if (!pre_export.empty()) cfg.export_role = geokr::export_role_from(pre_export);
      if (pre_seed) cfg.seed = *pre_seed;
      if (pre_epochs) cfg.epochs = *pre_epochs;
      if (pre_batch) cfg.batch_size = *pre_batch;
      cfg.validate();
      ordered_json eff = cfg.to_json();
      eff["tile_size"] = pre_tile;
      print_effective_config("pretrain", eff);
      if (cfg.precision == geokr::Precision::F64)
        return run_pretrain_typed<double>(cfg, pre_manifest, pre_scenes, pre_tile, pre_out);
      return run_pretrain_typed<float>(cfg, pre_manifest, pre_scenes, pre_tile, pre_out);
    }

    if (analyze->parsed()) {
      ordered_json cfg;
      cfg["old"] = an_old;
      cfg["new"] = an_new;
      cfg["format"] = an_format;
      print_effective_config("analyze-change", cfg);
      const ChangeInput older = load_change_input(an_old);
      const ChangeInput newer = load_change_input(an_new);
      const geokr::ChangeReport report =
          geokr::product_change_stats(older.resolve(), newer.resolve());
      std::optional<double> rate;
      if (older.is_manifest() && newer.is_manifest())
        rate = geokr::category_change_rate(older.records, newer.records);
      std::string payload;
      if (an_format == "text") {
        payload = report.format_table();
        if (rate) {
          char line[64];
          std::snprintf(line, sizeof line, "category change rate: %.4f\n", *rate);
          payload += line;
        }
      } else {
        ordered_json j = report.to_json();
        if (rate) j["category_change_rate"] = *rate;
        payload = j.dump(2) + "\n";
      }
      if (!an_out.empty())
        write_text(an_out, payload);
      else
        std::cout << payload;
      return 0;
    }

    if (probe->parsed()) {
      if (pr_checkpoint.empty() && !pr_random)
        geokr::raise(geokr::Errc::InvalidConfig, "pass --checkpoint or --random-init");
      geokr::TrainConfig tcfg;
      if (!pr_config.empty()) tcfg = geokr::TrainConfig::from_json(read_json_file(pr_config));
      geokr::ProbeConfig pcfg;
      pcfg.seeds = pr_seeds;
      pcfg.lr = pr_lr;
      pcfg.epochs = pr_epochs;
      pcfg.holdout = pr_holdout;
      pcfg.validate();
      ordered_json eff;
      eff["checkpoint"] = pr_random ? std::string("<random-init>") : pr_checkpoint;
      eff["manifest"] = pr_manifest;
      eff["tile_size"] = pr_tile;
      eff["precision"] = pr_precision;
      eff["seeds"] = pcfg.seeds;
      eff["lr"] = pcfg.lr;
      eff["epochs"] = pcfg.epochs;
      eff["holdout"] = pcfg.holdout;
      print_effective_config("probe", eff);
      if (pr_precision == "f64")
        return run_probe_typed<double>(pr_checkpoint, pr_random, pr_seed, tcfg, pr_manifest,
                                       pr_scenes, pr_tile, pcfg, pr_out);
      return run_probe_typed<float>(pr_checkpoint, pr_random, pr_seed, tcfg, pr_manifest, pr_scenes,
                                    pr_tile, pcfg, pr_out);
    }

    if (gradcheck->parsed()) {
      geokr::TrainConfig tcfg;
      if (!gc_config.empty()) tcfg = geokr::TrainConfig::from_json(read_json_file(gc_config));
      ordered_json eff;
      eff["precision"] = gc_precision;
      eff["samples"] = gc_samples;
      eff["batch"] = gc_batch;
      eff["tile_size"] = gc_tile;
      eff["seed"] = gc_seed;
      eff["tolerance"] = gc_tolerance;
      if (!gc_mutate.empty()) {
        eff["mutate"] = gc_mutate;
        eff["mutate_scale"] = gc_mutate_scale;
      }
      print_effective_config("gradcheck", eff);
      auto run = [&]<typename T>() {
        geokr::EncoderConfig encoder;
        encoder.height = gc_tile;
        encoder.width = gc_tile;
        encoder.stages = tcfg.stages;
        geokr::Rng rng(gc_seed);
        const geokr::ParameterSet<T> params = geokr::init_parameters<T>(encoder, rng);
        geokr::Tensor<T> batch =
            geokr::Tensor<T>::zeros({gc_batch, encoder.in_channels, gc_tile, gc_tile});
        for (T& v : batch.data) v = static_cast<T>(rng.uniform());
        std::vector<std::array<double, geokr::kActiveClassCount>> targets(gc_batch);
        for (auto& t : targets) {
          double total = 0.0;
          for (double& v : t) {
            v = rng.uniform() + 1e-3;
            total += v;
          }
          for (double& v : t) v /= total;
        }
        return geokr::finite_diff_check(encoder, params, batch, targets, gc_samples, rng, 1e-5,
                                        gc_mutate, gc_mutate_scale);
      };
      const geokr::GradCheckReport report =
          gc_precision == "f32" ? run.operator()<float>() : run.operator()<double>();
      const bool ok = report.max_rel_err < gc_tolerance;
      ordered_json out;
      out["checked"] = report.checked;
      out["max_rel_err"] = report.max_rel_err;
      out["worst_param"] = report.worst_param;
      out["worst_index"] = report.worst_index;
      out["worst_analytic"] = report.worst_analytic;
      out["worst_numeric"] = report.worst_numeric;
      out["tolerance"] = gc_tolerance;
      out["ok"] = ok;
      std::cout << out.dump(2) << "\n";
      return ok ? 0 : 1;
    }
  } catch (const geokr::Error& e) {
    std::cerr << "[geokr] error (" << geokr::errc_name(e.code()) << "): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "[geokr] error: " << e.what() << "\n";
    return 1;
  }
  return 2;  // no subcommand matched; require_subcommand should prevent this
}
