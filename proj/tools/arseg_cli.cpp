// arseg command-line interface.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "arseg/arseg.hpp"

namespace fs = std::filesystem;
using namespace arseg;
using Real = float;

namespace {

struct Common {
  std::string config;
  bool quiet = false;
};

RunConfig require_config(const std::string& path) {
  if (path.empty()) throw ConfigError("--config is required");
  return load_config(path);
}

/// Config from --config when given, else the echo stored in the checkpoint.
RunConfig config_for(const std::string& path, const Checkpoint& c) {
  if (!path.empty()) return load_config(path);
  if (!c.config.is_object() || c.config.empty()) throw ConfigError("checkpoint has no config echo; pass --config");
  return config_from_json(c.config);
}

ProgressFn progress_for(bool quiet) {
  if (quiet) return {};
  return [](const std::string& s) { std::cerr << s << std::endl; };
}

Mat<Real> load_image(const std::string& path, const ModelConfig& mc) {
  const io::Tensor t = io::read_tensor(path);
  if (t.dtype != "f32" || t.shape.size() != 3 || t.shape[0] != mc.image.in_channels ||
      t.shape[1] != mc.image.image_size || t.shape[2] != mc.image.image_size)
    throw FormatError(path + ": expected an f32 [" + std::to_string(mc.image.in_channels) + ", " +
                      std::to_string(mc.image.image_size) + ", " + std::to_string(mc.image.image_size) + "] image");
  return io::image_rows<Real>(t, path);
}

png::Gray8 mask_png(const Mat<Real>& column, int h, int w) {
  png::Gray8 img(w, h);
  for (int i = 0; i < h * w; ++i) img.pixels[static_cast<std::size_t>(i)] = png::ramp(column(i, 0));
  return img;
}

void write_mask(const fs::path& dir, const std::string& stem, const BinaryMask& m) {
  io::write_tensor(dir / (stem + ".arsg"), io::mask_tensor(m));
  png::write(dir / (stem + ".png"), mask_png(m.to_column<Real>(), m.h, m.w));
}

void cmd_gen_data(const Common& c, const std::string& out) {
  const RunConfig rc = require_config(c.config);
  const auto manifest = data::generate_dataset(rc.dataset, out);
  if (!c.quiet) std::cerr << "wrote " << manifest["records"].size() << " cases to " << out << std::endl;
}

void cmd_train_ae(const Common& c, const std::string& data_dir, const std::string& out) {
  const RunConfig rc = require_config(c.config);
  const data::Dataset ds = data::load_dataset(data_dir);
  const ModelConfig mc = rc.models();
  Rng init = derive_rng(rc.stage1.seed, "init.ae");
  AutoencoderModel<Real> ae(mc.ae, init);
  TrainResult res = train_stage1(rc.stage1, ds, ae, config_to_json(rc), progress_for(c.quiet));
  save_checkpoint(out, res.checkpoint);
  res.curve.write(fs::path(out) / "curve.csv");
}

void cmd_train_seg(const Common& c, const std::string& data_dir, const std::string& ae_ckpt, const std::string& out) {
  const RunConfig rc = require_config(c.config);
  if (!fs::exists(fs::path(ae_ckpt) / "index.json"))
    throw ConfigError("stage-1 checkpoint not found: " + ae_ckpt);
  const Checkpoint stage1 = load_checkpoint(ae_ckpt);
  require_stage(stage1, "stage1");
  const data::Dataset ds = data::load_dataset(data_dir);
  const ModelConfig mc = rc.models();
  SegmentationModels<Real> m = make_models<Real>(mc, rc.stage2.seed);
  restore_params(stage1, m.ae.params());
  TrainResult res = train_stage2(rc.stage2, ds, m, config_to_json(rc), progress_for(c.quiet));
  save_checkpoint(out, res.checkpoint);
  res.curve.write(fs::path(out) / "curve.csv");
}

struct SegmentArgs {
  std::string ckpt, image, out;
  int cls = 0;
  int n = 16;
  std::optional<std::uint64_t> seed;
  std::optional<double> temperature;
};

void cmd_segment(const Common& c, const SegmentArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  require_stage(ck, "stage2");
  const RunConfig rc = config_for(c.config, ck);
  const ModelConfig mc = rc.models();
  const auto m = models_from<Real>(ck, mc);
  const Mat<Real> image = load_image(a.image, mc);
  const double temp = a.temperature.value_or(rc.sampling.temperature);
  const std::uint64_t seed = a.seed.value_or(rc.sampling.seed);
  const SampleSet<Real> s = sample_masks(m, image, a.cls, a.n, temp, seed);
  const fs::path out(a.out);
  for (int i = 0; i < s.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%02d", i);
    write_mask(out, stem, binarize(s.masks[static_cast<std::size_t>(i)]));
  }
  const Consensus<Real> con = aggregate(s);
  io::write_tensor(out / "consensus_soft.arsg", io::soft_tensor(con.soft));
  png::write(out / "consensus_soft.png", mask_png(con.soft.values, con.soft.h, con.soft.w));
  write_mask(out, "consensus_binary", con.binary);
}

struct EvaluateArgs {
  std::string ckpt, data, split = "test", out;
  bool oracle = false;
  std::optional<std::uint64_t> seed;
  int max_cases = -1;
};

void cmd_evaluate(const Common& c, const EvaluateArgs& a) {
  const data::Dataset ds = data::load_dataset(a.data);
  EvalOptions eo;
  eo.split = a.split;
  nlohmann::json extra = nlohmann::json::object();
  metrics::MetricReport rep;
  if (a.oracle) {
    if (!c.config.empty()) {
      const RunConfig rc = load_config(c.config);
      eo.sample_counts = rc.metrics.sample_counts;
      eo.max_cases = rc.metrics.max_cases;
    }
    if (a.max_cases >= 0) eo.max_cases = a.max_cases;
    rep = evaluate(ds, oracle_predictor(), eo);
  } else {
    if (a.ckpt.empty()) throw ConfigError("--ckpt is required unless --oracle is given");
    const Checkpoint ck = load_checkpoint(a.ckpt);
    require_stage(ck, "stage2");
    const RunConfig rc = config_for(c.config, ck);
    const ModelConfig mc = rc.models();
    const auto m = models_from<Real>(ck, mc);
    eo.sample_counts = rc.metrics.sample_counts;
    eo.max_cases = a.max_cases >= 0 ? a.max_cases : rc.metrics.max_cases;
    eo.temperature = rc.sampling.temperature;
    eo.seed = a.seed.value_or(rc.sampling.seed);
    rep = evaluate(ds, model_predictor(m, eo.temperature), eo);
    extra["params_autoencoder"] = m.ae.params().count();
    extra["params_image_encoder"] = m.image.params().count();
    extra["params_segmentor"] = m.seg.params().count();
    extra["token_budget"] = token_budget(mc);
  }
  nlohmann::json j = report_json(rep);
  j.update(extra);
  io::write_file(a.out, j.dump(2) + "\n");
  if (!c.quiet) std::cout << j.dump() << std::endl;
}

struct VizArgs {
  std::string ckpt, image, out;
  int cls = 0;
  std::optional<std::uint64_t> seed;
  std::optional<double> temperature;
};

/// K+1 vertically stacked panels: the input image (first channel), then
/// decode(sum_{j<=k} phi_j(up(lookup(r_j)))) for k = 1..K.
void cmd_viz_scales(const Common& c, const VizArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  require_stage(ck, "stage2");
  const RunConfig rc = config_for(c.config, ck);
  const ModelConfig mc = rc.models();
  const auto m = models_from<Real>(ck, mc);
  const Mat<Real> image = load_image(a.image, mc);
  TokenPyramid pyr;
  segment_embedded(m, m.embed(image), a.cls, a.temperature.value_or(rc.sampling.temperature),
                   a.seed.value_or(rc.sampling.seed), &pyr);
  const int s = mc.ae.image_size, k = pyr.scales();
  png::Gray8 grid(s, s * (k + 1));
  for (int i = 0; i < s * s; ++i) grid.pixels[static_cast<std::size_t>(i)] = png::ramp(image(i, 0));
  for (int j = 1; j <= k; ++j) {
    const SoftMask<Real> dec = m.ae.decode(m.ae.dequantize_pyramid(pyr, j));
    for (int i = 0; i < s * s; ++i) grid.pixels[static_cast<std::size_t>(j * s * s + i)] = png::ramp(dec.values(i, 0));
  }
  png::write(a.out, grid);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arseg: autoregressive next-scale mask segmentation"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sc, bool config_required) {
    auto* o = sc->add_option("--config", common.config, "Run configuration JSON");
    if (config_required) o->required();
    sc->add_flag("--quiet", common.quiet, "Suppress progress output");
  };

  std::string out, data_dir, ae_ckpt;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  add_common(gen, true);
  gen->add_option("--out", out, "Output directory")->required();

  auto* tae = app.add_subcommand("train-ae", "Stage 1: train the multi-scale mask autoencoder");
  add_common(tae, true);
  tae->add_option("--data", data_dir, "Dataset directory")->required();
  tae->add_option("--out", out, "Checkpoint directory")->required();

  auto* tseg = app.add_subcommand("train-seg", "Stage 2: train the image encoder and segmentor");
  add_common(tseg, true);
  tseg->add_option("--data", data_dir, "Dataset directory")->required();
  tseg->add_option("--ae", ae_ckpt, "Stage-1 checkpoint directory")->required();
  tseg->add_option("--out", out, "Checkpoint directory")->required();

  SegmentArgs sa;
  auto* seg = app.add_subcommand("segment", "Sample N masks for one image and aggregate them");
  add_common(seg, false);
  seg->add_option("--ckpt", sa.ckpt, "Stage-2 checkpoint directory")->required();
  seg->add_option("--image", sa.image, "Image tensor (.arsg, f32 [C, H, W])")->required();
  seg->add_option("--class", sa.cls, "Target class index")->capture_default_str();
  seg->add_option("--n", sa.n, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
  seg->add_option("--seed", sa.seed, "Base sampling seed (default: sampling.seed)");
  seg->add_option("--temperature", sa.temperature, "Sampling temperature (default: sampling.temperature)");
  seg->add_option("--out", sa.out, "Output directory")->required();

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Compute GED, HM-IoU, Soft-Dice and Dice on a split");
  add_common(ev, false);
  ev->add_option("--ckpt", ea.ckpt, "Stage-2 checkpoint directory");
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--split", ea.split, "Split to evaluate")->capture_default_str();
  ev->add_option("--seed", ea.seed, "Sampling seed (default: sampling.seed)");
  ev->add_option("--max-cases", ea.max_cases, "Limit the number of cases (default: metrics.max_cases)");
  ev->add_flag("--oracle", ea.oracle, "Use the annotations themselves as predictions");
  ev->add_option("--out", ea.out, "Report JSON path")->required();

  VizArgs va;
  auto* viz = app.add_subcommand("viz-scales", "Render the coarse-to-fine decoding of one sample");
  add_common(viz, false);
  viz->add_option("--ckpt", va.ckpt, "Stage-2 checkpoint directory")->required();
  viz->add_option("--image", va.image, "Image tensor (.arsg, f32 [C, H, W])")->required();
  viz->add_option("--class", va.cls, "Target class index")->capture_default_str();
  viz->add_option("--seed", va.seed, "Sampling seed (default: sampling.seed)");
  viz->add_option("--temperature", va.temperature, "Sampling temperature (default: sampling.temperature)");
  viz->add_option("--out", va.out, "Output PNG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: usage: " << msg << std::endl;
    return 2;
  }

  try {
    if (*gen) cmd_gen_data(common, out);
    else if (*tae) cmd_train_ae(common, data_dir, out);
    else if (*tseg) cmd_train_seg(common, data_dir, ae_ckpt, out);
    else if (*seg) cmd_segment(common, sa);
    else if (*ev) cmd_evaluate(common, ea);
    else if (*viz) cmd_viz_scales(common, va);
  } catch (const Error& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    std::cerr << "error: " << e.kind() << ": " << msg << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
