// lm3d: generate data, train, evaluate, infer and plot.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lm3d/error.hpp"
#include "lm3d/eval.hpp"
#include "lm3d/image.hpp"
#include "lm3d/model.hpp"
#include "lm3d/raster.hpp"
#include "lm3d/synthgen.hpp"
#include "lm3d/training.hpp"
#include "lm3d/util.hpp"

using namespace lm3d;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  bool single_thread = false;
  std::string out;
  std::vector<std::string> argv;
};

json file_entry(const fs::path& p) { return {{"path", p.string()}, {"sha1", file_sha1(p)}}; }

json path_entry(const fs::path& p) {
  if (fs::is_directory(p) && fs::exists(p / "index.jsonl")) {
    return {{"path", p.string()}, {"index_sha1", file_sha1(p / "index.jsonl")}};
  }
  if (fs::is_regular_file(p)) return file_entry(p);
  return {{"path", p.string()}};
}

class Manifest {
 public:
  Manifest(std::string command, const Globals& g) : command_(std::move(command)), globals_(g) {
    start_ = std::chrono::steady_clock::now();
  }
  json config = json::object();
  json seeds = json::object();
  json inputs = json::array();
  json outputs = json::array();

  void output(const fs::path& p) { outputs.push_back(file_entry(p)); }

  fs::path write(const fs::path& dir) const {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const json m = {{"command", command_},
                    {"argv", globals_.argv},
                    {"single_thread", globals_.single_thread},
                    {"config", config},
                    {"seeds", seeds},
                    {"inputs", inputs},
                    {"outputs", outputs},
                    {"wall_clock_seconds", seconds}};
    fs::create_directories(dir);
    const fs::path path = dir / ("manifest_" + command_ + ".json");
    write_file_atomic(path, m.dump(1));
    return path;
  }

 private:
  std::string command_;
  const Globals& globals_;
  std::chrono::steady_clock::time_point start_;
};

fs::path out_dir(const Globals& g, const fs::path& fallback) { return g.out.empty() ? fallback : fs::path(g.out); }

// --- gen ----------------------------------------------------------------------

int cmd_gen(const Globals& g, const std::string& config_path) {
  const json j = read_json_file(config_path);
  std::vector<synthgen::GenSpec> specs;
  if (j.is_object() && j.contains("shards")) {
    for (const auto& s : j.at("shards")) specs.push_back(synthgen::gen_spec_from_json(s));
  } else {
    specs.push_back(synthgen::gen_spec_from_json(j));
  }
  const fs::path out = out_dir(g, "data");
  Manifest m("gen", g);
  m.inputs.push_back(file_entry(config_path));
  m.config = json::array();
  std::map<int, bool> seen;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    auto& s = specs[i];
    if (g.seed) s.seed = *g.seed + i;
    if (seen[s.dataset_id]) throw Error(ErrorCode::ConfigInvalid, "two shards share dataset_id " + std::to_string(s.dataset_id));
    seen[s.dataset_id] = true;
    const fs::path dir = out / ("shard_" + std::to_string(s.dataset_id));
    synthgen::generate_dataset(s, dir);
    m.config.push_back(synthgen::to_json(s));
    m.seeds["shard_" + std::to_string(s.dataset_id)] = s.seed;
    m.output(dir / "index.jsonl");
    m.output(dir / "spec.json");
    std::cout << dir.string() << " index " << file_sha1(dir / "index.jsonl") << "\n";
  }
  m.write(out);
  return 0;
}

// --- train --------------------------------------------------------------------

int cmd_train(const Globals& g, const std::string& config_path, std::optional<int> epochs,
              std::optional<long> max_steps, const std::string& resume) {
  training::TrainConfig cfg = training::load_train_config(config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (epochs) cfg.epochs = *epochs;
  if (max_steps) cfg.max_steps = *max_steps;
  if (!g.out.empty()) cfg.out_dir = g.out;
  cfg.validate();
  Manifest m("train", g);
  m.config = training::to_json(cfg);
  m.seeds["train"] = cfg.seed;
  m.inputs.push_back(file_entry(config_path));
  for (const auto& s : cfg.shards) m.inputs.push_back(path_entry(s));
  std::optional<fs::path> from;
  if (!resume.empty()) {
    from = resume;
    m.inputs.push_back(file_entry(resume));
  }
  const training::FitResult r = training::fit(cfg, from);
  for (const auto& p : {r.best, r.last}) {
    m.output(p);
    m.output(p.string() + ".json");
  }
  m.output(cfg.out_dir / "metrics.jsonl");
  m.write(cfg.out_dir);
  std::cout << "steps " << r.losses.size() << " best_val_nme "
            << (std::isfinite(r.best_val_nme) ? std::to_string(r.best_val_nme) : std::string("n/a")) << "\n"
            << "best " << r.best.string() << "\nlast " << r.last.string() << "\n";
  return 0;
}

// --- eval ---------------------------------------------------------------------

// The ablation variant whose configuration the checkpoint's model matches.
std::string variant_of(const json& manifest) {
  if (!manifest.contains("config")) return "checkpoint";
  const model::ModelConfig c = model::model_config_from_json(manifest.at("config"));
  for (const auto& name : model::variant_names()) {
    if (model::to_json(model::variant_config(name, c)) == model::to_json(c)) return name;
  }
  return "custom";
}

void print_report(const eval::EvalReport& r) {
  for (const auto& v : r.variants) {
    std::cout << v.name << " nme " << v.nme_mean;
    if (v.temporal_mean) std::cout << " temporal " << *v.temporal_mean;
    std::cout << "\n";
    for (const auto& run : v.runs) {
      for (const auto& s : run.shards) {
        if (s.visibility && s.visibility->precision && s.visibility->recall) {
          std::cout << "  dataset " << s.dataset_index << " visibility precision " << *s.visibility->precision
                    << " recall " << *s.visibility->recall << "\n";
        }
      }
    }
  }
  if (r.verdicts.contains("pass")) std::cout << "ordering " << (r.verdicts["pass"].get<bool>() ? "pass" : "fail") << "\n";
}

int cmd_eval(const Globals& g, const std::string& checkpoint, const std::vector<std::string>& shards, bool temporal,
             int visibility, int max_samples, bool ablation, const std::string& config_path, bool plots) {
  const fs::path out = out_dir(g, "runs/eval");
  Manifest m("eval", g);
  eval::EvalReport report;
  if (ablation) {
    if (config_path.empty()) throw Error(ErrorCode::InvalidArgument, "--ablation needs --config");
    eval::AblationConfig a = eval::ablation_config_from_json(read_json_file(config_path), fs::path(config_path).parent_path());
    if (!g.out.empty()) a.out_dir = out;
    if (g.seed) a.seeds = {*g.seed};
    m.inputs.push_back(file_entry(config_path));
    m.config = read_json_file(config_path);
    m.seeds["ablation"] = a.seeds;
    report = eval::run_ablation(a);
    m.output(a.out_dir / ("report_" + eval::report_tag(report) + ".json"));
    if (plots) {
      for (const auto& p : eval::emit_plots(report, a.out_dir / "plots")) m.output(p);
    }
    m.write(a.out_dir);
  } else {
    if (checkpoint.empty() || shards.empty()) throw Error(ErrorCode::InvalidArgument, "eval needs --checkpoint and --shards");
    eval::EvalOptions opt;
    opt.seed = g.seed.value_or(0);
    opt.temporal = temporal;
    opt.visibility_samples = visibility;
    opt.max_samples = max_samples;
    std::vector<fs::path> paths(shards.begin(), shards.end());
    eval::VariantSummary v;
    eval::RunResult run = eval::evaluate_checkpoint(checkpoint, paths, opt);
    v.name = variant_of(read_json_file(checkpoint + ".json"));
    run.variant = v.name;
    v.runs.push_back(std::move(run));
    eval::summarize(v);
    report.variants.push_back(std::move(v));
    report.metadata = {{"checkpoint", checkpoint}, {"shards", shards}, {"eval_seed", opt.seed}};
    m.config = {{"checkpoint", checkpoint}, {"shards", shards}, {"temporal", temporal}, {"visibility_samples", visibility},
                {"max_samples", max_samples}};
    m.seeds["eval"] = opt.seed;
    m.inputs.push_back(file_entry(checkpoint));
    for (const auto& s : paths) m.inputs.push_back(path_entry(s));
    fs::create_directories(out);
    const fs::path rp = out / ("report_" + eval::report_tag(report) + ".json");
    write_file_atomic(rp, eval::to_json(report).dump(1));
    m.output(rp);
    if (plots) {
      for (const auto& p : eval::emit_plots(report, out / "plots")) m.output(p);
    }
    m.write(out);
  }
  print_report(report);
  return 0;
}

// --- infer --------------------------------------------------------------------

geometry::Points2 load_queries(const std::string& spec) {
  if (spec == "sparse51") return synthgen::layout_uv(synthgen::Layout::sparse51);
  if (spec == "dense") return synthgen::layout_uv(synthgen::Layout::dense);
  const json j = read_json_file(spec);
  if (!j.is_array()) throw Error(ErrorCode::ConfigInvalid, "query file must be a JSON list of [u, v] pairs");
  geometry::Points2 uv(static_cast<Eigen::Index>(j.size()), 2);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const double u = j[i].at(0).get<double>(), v = j[i].at(1).get<double>();
    if (!(u >= 0 && u <= 1 && v >= 0 && v <= 1)) throw Error(ErrorCode::InvalidArgument, "query uv outside [0, 1]");
    uv(static_cast<Eigen::Index>(i), 0) = u;
    uv(static_cast<Eigen::Index>(i), 1) = v;
  }
  return uv;
}

std::vector<fs::path> list_images(const fs::path& input) {
  std::vector<fs::path> out;
  if (fs::is_directory(input)) {
    for (const auto& e : fs::directory_iterator(input)) {
      if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
  } else {
    if (!fs::exists(input)) throw Error(ErrorCode::ImageUnreadable, "no such image: " + input.string());
    out.push_back(input);
  }
  if (out.empty()) throw Error(ErrorCode::ImageUnreadable, "no PNG images in " + input.string());
  return out;
}

void draw_overlay(Image& img, const geometry::Points2& pts, const std::vector<bool>& visible) {
  for (Eigen::Index k = 0; k < pts.rows(); ++k) {
    const int cx = static_cast<int>(std::lround(to_pixel(pts(k, 0), img.width)));
    const int cy = static_cast<int>(std::lround(to_pixel(pts(k, 1), img.height)));
    const bool vis = visible[static_cast<std::size_t>(k)];
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
        img.at(y, x, 0) = vis ? 0.1f : 1.0f;
        img.at(y, x, 1) = vis ? 1.0f : 0.1f;
        img.at(y, x, 2) = 0.1f;
      }
    }
  }
}

json matrix_json(const geometry::Matrix23& a) {
  return json::array({json::array({a(0, 0), a(0, 1), a(0, 2)}), json::array({a(1, 0), a(1, 1), a(1, 2)})});
}

int cmd_infer(const Globals& g, const std::string& checkpoint, const std::string& input, const std::string& queries,
              int dataset, const std::vector<double>& box, bool dense_mesh, bool unwrap, bool merge, bool overlay,
              int texture_size) {
  json ckpt_manifest;
  const model::Model<float> m = model::load_checkpoint(checkpoint, &ckpt_manifest);
  if (dataset < 0 || dataset >= m.config().n_datasets) {
    throw Error(ErrorCode::InvalidArgument, "--dataset-style must be below " + std::to_string(m.config().n_datasets));
  }
  const std::string tag = ckpt_manifest.at("sha1").get<std::string>().substr(0, 12);
  const geometry::Points2 uv = load_queries(queries);
  const fs::path out = out_dir(g, "runs/infer");
  fs::create_directories(out);
  Manifest man("infer", g);
  man.config = {{"checkpoint", checkpoint}, {"input", input}, {"queries", queries}, {"dataset_style", dataset},
                {"dense_mesh", dense_mesh}, {"unwrap_texture", unwrap}, {"merge_textures", merge}, {"overlay", overlay}};
  if (!box.empty()) man.config["box"] = box;
  man.inputs.push_back(file_entry(checkpoint));

  std::array<double, 4> face_box{-1 / 1.2, -1 / 1.2, 1 / 1.2, 1 / 1.2};  // whole frame after the 1.2 margin
  if (!box.empty()) {
    if (box.size() != 4) throw Error(ErrorCode::InvalidArgument, "--box takes x0 y0 x1 y1");
    face_box = {box[0], box[1], box[2], box[3]};
  }
  std::mt19937_64 unused(0);
  const geometry::Affine2D crop = training::detector_crop(face_box, unused, 0.0);

  std::vector<raster::TextureMap> textures;
  json coverage = json::array();
  for (const auto& path : list_images(input)) {
    man.inputs.push_back(file_entry(path));
    const Image image = read_png(path);
    const auto pred = m.forward(image, uv, dataset, &crop, model::Mode::eval);
    const auto visible = model::predict_visibility(m, image, uv, dataset, &crop);
    json lms = json::array();
    for (Eigen::Index k = 0; k < uv.rows(); ++k) {
      lms.push_back({{"uv", {uv(k, 0), uv(k, 1)}},
                     {"deformed_uv", {pred.deformed_uv(k, 0), pred.deformed_uv(k, 1)}},
                     {"full", {pred.landmarks_full(k, 0), pred.landmarks_full(k, 1)}},
                     {"pixel", {to_pixel(pred.landmarks_full(k, 0), image.width), to_pixel(pred.landmarks_full(k, 1), image.height)}},
                     {"normalized", {pred.landmarks_norm(k, 0), pred.landmarks_norm(k, 1)}},
                     {"point3d", {pred.posed_points(k, 0), pred.posed_points(k, 1), pred.posed_points(k, 2)}},
                     {"canonical3d", {pred.canonical_points(k, 0), pred.canonical_points(k, 1), pred.canonical_points(k, 2)}},
                     {"confidence", pred.confidence(k)},
                     {"visible", static_cast<bool>(visible[static_cast<std::size_t>(k)])}});
    }
    const auto& gm = pred.gamma;
    const json result = {{"image", path.string()},
                         {"checkpoint_sha1", ckpt_manifest.at("sha1")},
                         {"dataset_style", dataset},
                         {"theta", matrix_json(pred.theta.matrix())},
                         {"gamma",
                          {{"rot6d", std::vector<double>(gm.rot6d.begin(), gm.rot6d.end())},
                           {"translation", {gm.translation.x(), gm.translation.y(), gm.translation.z()}},
                           {"focal_displacement", gm.focal_displacement},
                           {"effective_focal", gm.effective_focal()}}},
                         {"landmarks", lms}};
    const std::string stem = path.stem().string() + "_" + tag;
    const fs::path jp = out / (stem + ".json");
    write_file_atomic(jp, result.dump(1));
    man.output(jp);
    if (overlay) {
      Image over = image;
      draw_overlay(over, pred.landmarks_full, visible);
      const fs::path op = out / (stem + "_overlay.png");
      write_png(op, over);
      man.output(op);
    }
    if (dense_mesh) {
      const auto dense = model::predict_dense_mesh(m, image, dataset, &crop);
      const fs::path mp = out / (stem + "_mesh.obj");
      geometry::write_obj(mp, dense.posed_points, m.mesh().triangles, &m.mesh().uv);
      man.output(mp);
    }
    if (unwrap || merge) {
      raster::TextureMap tex = model::predict_texture(m, image, dataset, &crop, texture_size);
      coverage.push_back({{"image", path.string()}, {"covered_texels", tex.covered()}});
      if (unwrap) {
        const fs::path tp = out / (stem + "_texture.png"), wp = out / (stem + "_texture_weight.pgm");
        raster::write_texture(tex, tp, wp);
        man.output(tp);
        man.output(wp);
      }
      textures.push_back(std::move(tex));
    }
    std::cout << jp.string() << "\n";
  }
  if (merge) {
    const raster::TextureMap merged = raster::merge_textures(textures);
    const fs::path tp = out / ("merged_" + tag + "_texture.png"), wp = out / ("merged_" + tag + "_texture_weight.pgm");
    raster::write_texture(merged, tp, wp);
    const fs::path sp = out / ("merged_" + tag + "_coverage.json");
    write_file_atomic(sp, json{{"views", coverage}, {"merged_covered_texels", merged.covered()}}.dump(1));
    for (const auto& p : {tp, wp, sp}) man.output(p);
    std::cout << "merged texels " << merged.covered() << "\n";
  }
  man.write(out);
  return 0;
}

// --- plot ---------------------------------------------------------------------

int cmd_plot(const Globals& g, const std::string& report_path) {
  const eval::EvalReport r = eval::report_from_json(read_json_file(report_path));
  const fs::path out = out_dir(g, "runs/plots");
  Manifest m("plot", g);
  m.config = {{"report", report_path}};
  m.inputs.push_back(file_entry(report_path));
  for (const auto& p : eval::emit_plots(r, out)) {
    m.output(p);
    std::cout << p.string() << "\n";
  }
  m.write(out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  for (int i = 0; i < argc; ++i) g.argv.emplace_back(argv[i]);
  CLI::App app{"lm3d: 3D landmark pipeline tools"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed override")->group("Global");
  app.add_flag("--single-thread", g.single_thread, "Run every stage on one thread")->group("Global");
  app.add_option("--out", g.out, "Output directory")->group("Global");

  std::string config, checkpoint, resume, input, queries = "sparse51", report;
  std::optional<int> epochs;
  std::optional<long> max_steps;
  std::vector<std::string> shards;
  std::vector<double> box;
  bool temporal = false, ablation = false, plots = false, dense_mesh = false, unwrap = false, merge = false,
       overlay = false;
  int visibility = 0, max_samples = 0, dataset = 0, texture_size = 128;

  auto* gen = app.add_subcommand("gen", "Generate synthetic shards");
  gen->add_option("--config", config, "Generation spec (JSON)")->required();

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Train config (JSON)")->required();
  train->add_option("--epochs", epochs, "Epoch override");
  train->add_option("--max-steps", max_steps, "Stop after this many total steps");
  train->add_option("--resume", resume, "Continue from a last.ckpt");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or run the ablation");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
  ev->add_option("--shards", shards, "Test shards; dataset index is the position")->expected(1, -1);
  ev->add_flag("--temporal", temporal, "Score sequences (temporal error, traces)");
  ev->add_option("--visibility", visibility, "Samples per shard scored for visibility");
  ev->add_option("--max-samples", max_samples, "Samples per shard (0: all)");
  ev->add_flag("--ablation", ablation, "Train and evaluate the variant sweep from --config");
  ev->add_option("--config", config, "Ablation config (JSON)");
  ev->add_flag("--plots", plots, "Also emit plots");

  auto* inf = app.add_subcommand("infer", "Predict landmarks for images");
  inf->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  inf->add_option("--input", input, "Image or directory of PNGs")->required();
  inf->add_option("--queries", queries, "sparse51, dense, or a JSON list of [u, v]");
  inf->add_option("--dataset-style", dataset, "Dataset code used for the queries");
  inf->add_option("--box", box, "Face box x0 y0 x1 y1 (normalized) for detector-crop models")->expected(4);
  inf->add_flag("--dense-mesh", dense_mesh, "Export the predicted dense mesh (OBJ)");
  inf->add_flag("--unwrap-texture", unwrap, "Unwrap each image onto the UV chart");
  inf->add_flag("--merge-textures", merge, "Merge the unwrapped textures of all inputs");
  inf->add_flag("--overlay", overlay, "Write landmark overlays");
  inf->add_option("--texture-size", texture_size, "Texture side in texels");

  auto* plt = app.add_subcommand("plot", "Plot an evaluation report");
  plt->add_option("--report", report, "Report JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_code_name(ErrorCode::InvalidArgument) << ": " << e.what() << "\n";
    return 2;
  }
  if (*seed_opt) g.seed = seed;
  if (g.single_thread) use_single_thread();

  try {
    if (*gen) return cmd_gen(g, config);
    if (*train) return cmd_train(g, config, epochs, max_steps, resume);
    if (*ev) return cmd_eval(g, checkpoint, shards, temporal, visibility, max_samples, ablation, config, plots);
    if (*inf) return cmd_infer(g, checkpoint, input, queries, dataset, box, dense_mesh, unwrap, merge, overlay, texture_size);
    if (*plt) return cmd_plot(g, report);
  } catch (const Error& e) {
    std::cerr << error_code_name(e.code()) << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
