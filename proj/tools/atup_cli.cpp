// atup: train, evaluate, benchmark and inspect attention upsampling models.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "atup/atup.hpp"
#include "atup/gradsuite.hpp"

namespace fs = std::filesystem;
using namespace atup;

namespace {

// ---------------------------------------------------------------------------
// Config files

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// `key = value` lines; `#` starts a comment.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CLI::ValidationError("--config", "cannot open " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--config", path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

/// Appends `--key=value` for every config key not already given on the
/// command line.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  fs::path cfg;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) cfg = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) cfg = args[i].substr(9);
  }
  if (cfg.empty()) return args;
  for (const auto& [k, v] : read_config(cfg)) {
    const std::string flag = "--" + k;
    if (k == "config" || has_flag(args, flag)) continue;
    args.push_back(flag + "=" + v);
  }
  return args;
}

std::string option_value(const CLI::Option* o) {
  std::string v;
  if (o->count()) {
    for (const auto& r : o->results()) v += (v.empty() ? "" : ",") + r;
  } else {
    v = o->get_default_str();
  }
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  return v;
}

/// Resolved values of the named options as `key = value` lines.
std::string resolved(const CLI::App* app, const std::vector<std::string>& only = {}) {
  std::string out;
  for (const auto* o : app->get_options()) {
    const auto& names = o->get_lnames();
    if (names.empty() || names[0] == "help" || names[0] == "config") continue;
    if (!only.empty() && std::find(only.begin(), only.end(), names[0]) == only.end()) continue;
    out += names[0] + " = " + option_value(o) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flags

struct Common {
  std::uint64_t seed = 0;
  int threads = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads for the attention kernels")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app->add_option("--config", "File of key = value lines setting any flag; the command line wins");
}

struct TrainFlags {
  TrainConfig cfg;
  std::string schedule = "step_decay";
  fs::path manifest, out;
};

void add_train_flags(CLI::App* app, TrainFlags& f) {
  auto& c = f.cfg;
  app->add_option("--manifest", f.manifest, "Dataset manifest")->required();
  app->add_option("--out", f.out, "Output directory for checkpoints and metrics")->required();
  app->add_option("--lr", c.lr0, "Initial learning rate")->capture_default_str();
  app->add_option("--batch", c.batch, "Batch size")->capture_default_str();
  app->add_option("--epochs", c.epochs, "Epochs")->capture_default_str();
  app->add_option("--max-steps", c.max_steps, "Stop after this many steps (0: no limit)")->capture_default_str();
  app->add_option("--schedule", f.schedule, "constant, step_decay or plateau")
      ->capture_default_str()
      ->check(CLI::IsMember({"constant", "step_decay", "plateau"}));
  app->add_option("--milestones", c.milestones, "Epochs at which step_decay multiplies by --step-factor")
      ->delimiter(',')
      ->capture_default_str();
  app->add_option("--step-factor", c.step_factor, "Step decay factor")->capture_default_str();
  app->add_option("--plateau-factor", c.plateau_factor, "Plateau decay factor")->capture_default_str();
  app->add_option("--patience", c.patience, "Evaluations without improvement before a plateau decay")
      ->capture_default_str();
  app->add_option("--plateau-threshold", c.plateau_threshold, "Relative improvement that resets patience")
      ->capture_default_str();
  app->add_option("--loss", c.loss, "Training loss")->capture_default_str()->check(CLI::IsMember({"mse"}));
  app->add_option("--patch", c.patch, "HR patch side (0: per-task default)")->capture_default_str();
  app->add_option("--patch-stride", c.patch_stride, "Patch stride (0: half the patch)")->capture_default_str();
  app->add_option("--augment", c.augment, "Scale and rotation augmentation")->capture_default_str();
  app->add_option("--augment-compose", c.augment_compose, "Rotate the downscaled copies too")->capture_default_str();
  app->add_option("--eval-every", c.eval_every, "Epochs between evaluations")->capture_default_str();
  app->add_option("--checkpoint-every", c.checkpoint_every, "Epochs between numbered checkpoints (0: best only)")
      ->capture_default_str();
  app->add_option("--beta1", c.beta1, "Adam beta1")->capture_default_str();
  app->add_option("--beta2", c.beta2, "Adam beta2")->capture_default_str();
  app->add_option("--adam-eps", c.adam_eps, "Adam epsilon")->capture_default_str();
}

const std::vector<std::string> kSisrKeys{"scale",      "features",   "block",        "stem-kernel", "res-kernel",
                                         "up-kernel",  "out-kernel", "scale-logits", "pixel-mean"};

struct SisrFlags {
  SisrSpec spec;
  std::string block = "attention";
  SisrSpec get() const {
    auto s = spec;
    s.block = parse_block_kind(block);
    return s;
  }
};

void add_sisr_flags(CLI::App* app, SisrFlags& f) {
  auto& s = f.spec;
  app->add_option("--scale", s.upsample_factor, "Upsampling factor (power of two)")->capture_default_str();
  app->add_option("--features", s.features, "Feature channels")->capture_default_str();
  app->add_option("--block", f.block, "Upsampling block: attention or deconv")
      ->capture_default_str()
      ->check(CLI::IsMember({"attention", "deconv"}));
  app->add_option("--stem-kernel", s.stem_kernel, "First layer kernel")->capture_default_str();
  app->add_option("--res-kernel", s.res_kernel, "Residual block kernel")->capture_default_str();
  app->add_option("--up-kernel", s.up_kernel, "Upsampling layer kernel")->capture_default_str();
  app->add_option("--out-kernel", s.out_kernel, "Final layer kernel")->capture_default_str();
  app->add_option("--scale-logits", s.scale_logits, "Divide attention logits by sqrt(channels)")
      ->capture_default_str();
  app->add_option("--pixel-mean", s.pixel_mean, "Constant subtracted from the input and added to the output")
      ->capture_default_str();
}

const std::vector<std::string> kJointKeys{"preset",    "factor",      "tg-kernels", "f-kernels",   "m-kernels",
                                          "attn-kernel", "share-m", "scale-logits", "depth-scale"};

struct JointFlags {
  std::string preset = "SA_M1_F8";
  JointSpec spec = JointSpec::preset("SA_M1_F8", 4);
  double depth_scale = 0;
  JointSpec get() const {
    auto s = JointSpec::preset(preset, spec.upsample_factor);
    s.tg_kernels = spec.tg_kernels;
    s.f_kernels = spec.f_kernels;
    s.m_kernels.assign(s.m_channels.size(), spec.m_kernels.empty() ? 3 : spec.m_kernels.front());
    if (spec.m_kernels.size() == s.m_channels.size()) s.m_kernels = spec.m_kernels;
    s.attn_kernel = spec.attn_kernel;
    s.share_m = spec.share_m;
    s.scale_logits = spec.scale_logits;
    return s;
  }
};

void add_joint_flags(CLI::App* app, JointFlags& f) {
  auto& s = f.spec;
  app->add_option("--preset", f.preset, "Width preset")
      ->capture_default_str()
      ->check(CLI::IsMember({"SA_M1_F8", "SA_M1_F16", "SA_M1_F32", "SA_M2_F32"}));
  app->add_option("--factor", s.upsample_factor, "Upsampling factor (power of two)")->capture_default_str();
  app->add_option("--tg-kernels", s.tg_kernels, "Target and guide CNN kernel sizes")
      ->delimiter(',')
      ->capture_default_str();
  app->add_option("--f-kernels", s.f_kernels, "Fusion CNN kernel sizes, output layer last")
      ->delimiter(',')
      ->capture_default_str();
  app->add_option("--m-kernels", s.m_kernels, "Query/key CNN kernel sizes (one value applies to all layers)")
      ->delimiter(',')
      ->capture_default_str();
  app->add_option("--attn-kernel", s.attn_kernel, "Attention window")->capture_default_str();
  app->add_option("--share-m", s.share_m, "Share the query/key CNN across stages")->capture_default_str();
  app->add_option("--scale-logits", s.scale_logits, "Divide attention logits by sqrt(channels)")
      ->capture_default_str();
  app->add_option("--depth-scale", f.depth_scale, "Depth units mapped to 1.0 (0: max depth of the training set)")
      ->capture_default_str();
}

// ---------------------------------------------------------------------------
// Data

std::vector<ManifestRecord> records_or_all(const Manifest& m, Role r) {
  auto out = m.with_role(r);
  return out.empty() ? m.records : out;
}

SisrDataset<float> load_sisr(const fs::path& manifest) {
  const auto m = load_manifest(manifest, false);
  SisrDataset<float> d;
  for (const auto& r : m.with_role(Role::train)) d.train.push_back(rgb_to_y<float>(load_png(r.target)));
  for (const auto& r : records_or_all(m, Role::eval)) {
    d.eval.push_back(rgb_to_y<float>(load_png(r.target)));
    d.eval_names.push_back(r.target.filename().string());
  }
  return d;
}

JointDataset<float> load_joint(const fs::path& manifest, double& depth_scale) {
  const auto m = load_manifest(manifest, false);
  struct Raw {
    DepthMap depth;
    ImageU8 guide;
    std::string name;
  };
  auto load = [](const std::vector<ManifestRecord>& recs) {
    std::vector<Raw> out;
    for (const auto& r : recs) {
      if (!r.guide) throw std::runtime_error("joint manifest record " + r.target.string() + " has no guide image");
      out.push_back({load_pgm16(r.target), load_png(*r.guide), r.target.filename().string()});
    }
    return out;
  };
  const auto train = load(m.with_role(Role::train));
  const auto eval = load(records_or_all(m, Role::eval));
  if (depth_scale <= 0) {
    std::uint16_t mx = 0;
    for (const auto* set : {&train, &eval})
      for (const auto& r : *set)
        for (auto v : r.depth.data) mx = std::max(mx, v);
    depth_scale = std::max<double>(mx, 1);
  }
  JointDataset<float> d;
  d.depth_scale = depth_scale;
  auto convert = [&](const Raw& r) {
    auto t = to_tensor<float>(r.depth);
    for (auto& v : t.data()) v = static_cast<float>(v / depth_scale);
    if (r.guide.channels != 3) throw std::runtime_error("guide " + r.name + " must be RGB");
    return JointSample<float>{std::move(t), to_tensor<float>(r.guide)};
  };
  for (const auto& r : train) d.train.push_back(convert(r));
  for (const auto& r : eval) {
    d.eval.push_back(convert(r));
    d.eval_names.push_back(r.name);
  }
  return d;
}

void print_scores(const std::vector<std::string>& names, const std::vector<ImageScore>& model,
                  const std::vector<ImageScore>& baseline, const char* metric, bool psnr) {
  std::cout << "image," << metric << ",bicubic_" << metric << "\n";
  auto pick = [&](const ImageScore& s) { return format_metric(psnr ? s.psnr_db : s.rmse); };
  for (std::size_t i = 0; i < model.size(); ++i)
    std::cout << names[i] << "," << pick(model[i]) << "," << pick(baseline[i]) << "\n";
  const auto m = mean_scores(model), b = mean_scores(baseline);
  std::cout << "mean," << format_metric(psnr ? m.psnr_db : m.rmse) << ","
            << format_metric(psnr ? b.psnr_db : b.rmse) << "\n";
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

// ---------------------------------------------------------------------------
// Commands

int train_sisr_cmd(const CLI::App* app, const Common& c, TrainFlags& t, const SisrFlags& sf) {
  t.cfg.schedule = parse_schedule(t.schedule);
  t.cfg.seed = c.seed;
  t.cfg.out_dir = t.out;
  const auto data = load_sisr(t.manifest);
  if (data.train.empty()) throw std::runtime_error("manifest has no train records");
  SisrModel<float> model(sf.get(), c.seed);
  fs::create_directories(t.out);
  write_text(t.out / "model.cfg", resolved(app, kSisrKeys));
  std::cout << "parameters = " << model.params().num_params() << "\n";
  const auto r = train_sisr(model, data, t.cfg, &std::cout);
  const auto base = mean_scores(eval_bicubic(data.eval, model.spec().upsample_factor));
  std::cout << "best epoch " << r.best_epoch << " psnr " << format_metric(r.best_metric) << " (bicubic "
            << format_metric(base.psnr_db) << ") after " << r.steps << " steps\n";
  if (r.aborted) throw NumericError("training aborted: " + r.abort_reason);
  return 0;
}

struct EvalSisrFlags {
  fs::path checkpoint, manifest, pred, gt;
  int shave = -1;
};

int eval_sisr_cmd(const EvalSisrFlags& e, const SisrFlags& sf) {
  if (!e.pred.empty() || !e.gt.empty()) {
    if (e.pred.empty() || e.gt.empty()) throw CLI::ValidationError("--pred/--gt", "both are required together");
    auto p = rgb_to_y<double>(load_png(e.pred)), g = rgb_to_y<double>(load_png(e.gt));
    if (p.shape() != g.shape()) throw ShapeError("prediction and ground truth differ in size");
    const auto s = static_cast<std::size_t>(std::max(e.shave, 0));
    const double m = mse(shave(p, s), shave(g, s));
    std::cout << "image,psnr_db,rmse\n"
              << e.pred.filename().string() << "," << format_metric(psnr_from_mse(m, 1.0)) << ","
              << format_metric(std::sqrt(m)) << "\n";
    return 0;
  }
  if (e.checkpoint.empty() || e.manifest.empty())
    throw CLI::ValidationError("eval-sisr", "give --checkpoint with --manifest, or --pred with --gt");
  SisrModel<float> model(sf.get(), 0);
  load_checkpoint(e.checkpoint, model.params());
  const auto data = load_sisr(e.manifest);
  const int s = model.spec().upsample_factor;
  auto scores = eval_sisr(model, data.eval);
  auto base = eval_bicubic(data.eval, s);
  print_scores(data.eval_names, scores, base, "psnr_db", true);
  return 0;
}

int train_joint_cmd(const CLI::App* app, const Common& c, TrainFlags& t, JointFlags& jf) {
  t.cfg.schedule = parse_schedule(t.schedule);
  t.cfg.seed = c.seed;
  t.cfg.out_dir = t.out;
  auto data = load_joint(t.manifest, jf.depth_scale);
  if (data.train.empty()) throw std::runtime_error("manifest has no train records");
  std::cout << "depth-scale = " << format_metric(jf.depth_scale) << "\n";
  JointModel<float> model(jf.get(), c.seed);
  fs::create_directories(t.out);
  auto cfg = resolved(app, kJointKeys);
  const auto pos = cfg.find("depth-scale = ");
  cfg = cfg.substr(0, pos) + "depth-scale = " + format_metric(jf.depth_scale) + "\n" +
        cfg.substr(cfg.find('\n', pos) + 1);
  write_text(t.out / "model.cfg", cfg);
  std::cout << "parameters = " << model.params().num_params() << "\n";
  const auto r = train_joint(model, data, t.cfg, &std::cout);
  const auto base = mean_scores(eval_joint_bicubic(data, model.spec().upsample_factor));
  std::cout << "best epoch " << r.best_epoch << " rmse " << format_metric(r.best_metric) << " (bicubic "
            << format_metric(base.rmse) << ") after " << r.steps << " steps\n";
  if (r.aborted) throw NumericError("training aborted: " + r.abort_reason);
  return 0;
}

int eval_joint_cmd(const fs::path& checkpoint, const fs::path& manifest, JointFlags& jf) {
  if (jf.depth_scale <= 0) std::cerr << "warning: --depth-scale not given, using the dataset maximum\n";
  const auto data = load_joint(manifest, jf.depth_scale);
  JointModel<float> model(jf.get(), 0);
  load_checkpoint(checkpoint, model.params());
  print_scores(data.eval_names, eval_joint(model, data), eval_joint_bicubic(data, model.spec().upsample_factor),
               "rmse", false);
  return 0;
}

int upsample_cmd(const fs::path& checkpoint, const fs::path& input, const fs::path& output, const SisrFlags& sf) {
  SisrModel<float> model(sf.get(), 0);
  load_checkpoint(checkpoint, model.params());
  const auto img = load_png(input);
  const auto s = static_cast<std::size_t>(model.spec().upsample_factor);
  const auto rgb = to_tensor<float>(img);
  const std::size_t H = rgb.dim(1) * s, W = rgb.dim(2) * s;
  if (img.channels == 1) {
    save_png(output, to_image(model.predict(rgb)));
  } else {
    const auto ycc = rgb_to_ycbcr(rgb);
    Tensor<float> y({1, rgb.dim(1), rgb.dim(2)});
    std::copy_n(ycc.data().begin(), y.size(), y.data().begin());
    const auto y_hr = model.predict(y);
    auto up = bicubic_resize(ycc, H, W);
    std::copy_n(y_hr.data().begin(), y_hr.size(), up.data().begin());
    auto out = ycbcr_to_rgb(up);
    save_png(output, to_image(out));
  }
  std::cout << "wrote " << output.string() << " (" << H << "x" << W << ")\n";
  return 0;
}

struct BenchFlags {
  std::vector<std::string> ops = bench_ops();
  std::vector<std::size_t> cin{32}, cout{32}, h{64}, w{64};
  std::vector<int> s{2}, k{3};
  int reps = 20, warmup = 1;
  double tol = 1e-4;
  fs::path out;
};

int bench_cmd(const Common& c, const BenchFlags& b) {
  std::vector<BenchShape> grid;
  for (auto ci : b.cin)
    for (auto co : b.cout)
      for (auto hh : b.h)
        for (auto ww : b.w)
          for (int s : b.s)
            for (int k : b.k) grid.push_back({ci, co, hh, ww, s, k});
  const auto recs = bench(b.ops, grid, b.reps, c.threads, c.seed, b.warmup, b.tol, &std::cerr);
  const auto csv = bench_csv(recs);
  if (b.out.empty())
    std::cout << csv;
  else
    write_text(b.out, csv);
  return 0;
}

int gradcheck_cmd(const Common& c, GradSuiteOptions opt) {
  opt.seed = c.seed;
  bool ok = true;
  for (const auto& g : gradient_suite(opt)) {
    std::cout << (g.report.passed ? "ok   " : "FAIL ") << g.name << ": " << g.report.summary() << "\n";
    ok = ok && g.report.passed;
  }
  std::cout << (ok ? "all gradients agree" : "gradient check failed") << "\n";
  return ok ? 0 : 1;
}

struct ParamsFlags {
  std::uint64_t cin = 64, cout = 64, k = 3, h = 64, w = 64, s = 2, features = 32;
};

int params_cmd(const ParamsFlags& p) {
  std::cout << "deconv " << count_params_deconv(p.cin, p.cout, p.k) << "\n";
  std::cout << "attention " << count_params_attention(p.cin, p.cout, p.k) << "\n";
  std::cout << "flops_deconv " << flops_transposed_conv(p.cin, p.cout, p.h, p.w, p.s, p.k) << "\n";
  std::cout << "flops_attention " << flops_attention_upsample(p.cin, p.cout, p.h, p.w, p.s, p.k) << "\n";
  std::cout << "\nscale,model,features,parameters\n";
  for (int scale : {2, 4, 8})
    for (auto kind : {BlockKind::deconv, BlockKind::attention}) {
      SisrSpec s;
      s.upsample_factor = scale;
      s.block = kind;
      s.features = p.features;
      s.up_kernel = static_cast<int>(p.k);
      std::cout << scale << "," << to_string(kind) << "," << p.features << ","
                << SisrModel<float>(s, 0).params().num_params() << "\n";
    }
  return 0;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  CLI::App app{"Attention-based upsampling: training, evaluation, benchmarks and gradient checks", "atup"};
  app.require_subcommand(1);

  Common common;
  Common gcommon{7, 1};
  TrainFlags tf;
  SisrFlags sf;
  JointFlags jf;
  EvalSisrFlags ef;
  fs::path checkpoint, manifest, input, output;
  BenchFlags bf;
  GradSuiteOptions gopt;
  ParamsFlags pf;

  auto* train_sisr_app = app.add_subcommand("train-sisr", "Train a super-resolution model");
  add_common(train_sisr_app, common);
  add_sisr_flags(train_sisr_app, sf);
  add_train_flags(train_sisr_app, tf);

  auto* eval_sisr_app = app.add_subcommand("eval-sisr", "PSNR of a super-resolution model or of an image pair");
  add_common(eval_sisr_app, common);
  add_sisr_flags(eval_sisr_app, sf);
  eval_sisr_app->add_option("--checkpoint", ef.checkpoint, "Model checkpoint");
  eval_sisr_app->add_option("--manifest", ef.manifest, "Dataset manifest (eval records)");
  eval_sisr_app->add_option("--pred", ef.pred, "Predicted PNG (pair mode)");
  eval_sisr_app->add_option("--gt", ef.gt, "Ground-truth PNG (pair mode)");
  eval_sisr_app->add_option("--shave", ef.shave, "Border pixels ignored in pair mode")->capture_default_str();

  auto* train_joint_app = app.add_subcommand("train-joint", "Train a guided depth upsampling model");
  add_common(train_joint_app, common);
  add_joint_flags(train_joint_app, jf);
  add_train_flags(train_joint_app, tf);

  auto* eval_joint_app = app.add_subcommand("eval-joint", "RMSE of a guided depth upsampling model");
  add_common(eval_joint_app, common);
  add_joint_flags(eval_joint_app, jf);
  eval_joint_app->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval_joint_app->add_option("--manifest", manifest, "Dataset manifest (eval records)")->required();

  auto* upsample_app = app.add_subcommand("upsample", "Upscale one PNG with a super-resolution model");
  add_common(upsample_app, common);
  add_sisr_flags(upsample_app, sf);
  upsample_app->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  upsample_app->add_option("--input", input, "Input PNG")->required()->check(CLI::ExistingFile);
  upsample_app->add_option("--output", output, "Output PNG")->required();

  auto* bench_app = app.add_subcommand("bench", "Time reference and fast upsampling kernels");
  add_common(bench_app, common);
  bench_app->add_option("--ops", bf.ops, "Operators to time")->delimiter(',')->capture_default_str()->check(
      CLI::IsMember(bench_ops()));
  bench_app->add_option("--cin", bf.cin, "Input channels")->delimiter(',')->capture_default_str();
  bench_app->add_option("--cout", bf.cout, "Output channels")->delimiter(',')->capture_default_str();
  bench_app->add_option("--height", bf.h, "Input height")->delimiter(',')->capture_default_str();
  bench_app->add_option("--width", bf.w, "Input width")->delimiter(',')->capture_default_str();
  bench_app->add_option("--s", bf.s, "Upsampling factor")->delimiter(',')->capture_default_str();
  bench_app->add_option("--k", bf.k, "Kernel size")->delimiter(',')->capture_default_str();
  bench_app->add_option("--reps", bf.reps, "Timed repetitions")->capture_default_str()->check(CLI::PositiveNumber);
  bench_app->add_option("--warmup", bf.warmup, "Untimed warm-up runs")->capture_default_str();
  bench_app->add_option("--tol", bf.tol, "Relative checksum tolerance")->capture_default_str();
  bench_app->add_option("--out", bf.out, "CSV output path (default: stdout)");

  auto* grad_app = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  add_common(grad_app, gcommon);
  grad_app->add_option("--eps", gopt.eps, "Central difference step")->capture_default_str();
  grad_app->add_option("--tol", gopt.tol, "Relative tolerance")->capture_default_str();
  grad_app->add_option("--coords", gopt.coords, "Coordinates checked per parameter")->capture_default_str();

  auto* params_app = app.add_subcommand("params", "Parameter and FLOP counts");
  add_common(params_app, common);
  params_app->add_option("--cin", pf.cin, "Input channels")->capture_default_str();
  params_app->add_option("--cout", pf.cout, "Output channels")->capture_default_str();
  params_app->add_option("--k", pf.k, "Kernel size")->capture_default_str();
  params_app->add_option("--height", pf.h, "Input height for FLOPs")->capture_default_str();
  params_app->add_option("--width", pf.w, "Input width for FLOPs")->capture_default_str();
  params_app->add_option("--s", pf.s, "Upsampling factor for FLOPs")->capture_default_str();
  params_app->add_option("--features", pf.features, "Feature width of the model table")->capture_default_str();

  try {
    auto expanded = expand_config(args);
    std::reverse(expanded.begin(), expanded.end());
    app.parse(expanded);
    auto* sub = app.get_subcommands().front();
    std::cout << "# " << sub->get_name() << "\n" << resolved(sub);
    std::cout.flush();
    set_threads(sub == grad_app ? gcommon.threads : common.threads);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_sisr_app) return train_sisr_cmd(train_sisr_app, common, tf, sf);
    if (*eval_sisr_app) return eval_sisr_cmd(ef, sf);
    if (*train_joint_app) return train_joint_cmd(train_joint_app, common, tf, jf);
    if (*eval_joint_app) return eval_joint_cmd(checkpoint, manifest, jf);
    if (*upsample_app) return upsample_cmd(checkpoint, input, output, sf);
    if (*bench_app) return bench_cmd(common, bf);
    if (*grad_app) return gradcheck_cmd(gcommon, gopt);
    if (*params_app) return params_cmd(pf);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
