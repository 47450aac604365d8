// mgc: dataset generation, training, evaluation and diagnostics.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mgc/errors.hpp"
#include "mgc/gradcheck.hpp"
#include "mgc/report.hpp"
#include "mgc/synthgen.hpp"
#include "mgc/trainer.hpp"

#ifndef MGC_GIT_DESCRIBE
#define MGC_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using namespace mgc;

namespace {

enum Exit { kOk = 0, kValidation = 2, kNumerical = 3, kIo = 4 };

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Options shared by train and compare.
struct TrainFlags {
  trainer::TrainConfig cfg;
  net::ModelConfig model;
  std::string stage = "joint", prm_branch = "both", attention = "cross", gate = "sigmoid";
  std::vector<int> stage_channels{16, 32};
  bool no_prm = false;

  void add(CLI::App* sub, bool with_stage) {
    if (with_stage) {
      sub->add_option("--stage", stage, "Training stage")->check(CLI::IsMember({"rgb", "pose", "joint"}))->capture_default_str();
    }
    sub->add_option("--epochs", cfg.epochs, "Number of epochs")->capture_default_str();
    sub->add_option("--batch-size", cfg.batch_size, "Mini-batch size")->capture_default_str();
    sub->add_option("--lr", cfg.lr, "Initial learning rate")->capture_default_str();
    sub->add_option("--momentum", cfg.momentum, "SGD momentum")->capture_default_str();
    sub->add_option("--weight-decay", cfg.weight_decay, "L2 weight decay")->capture_default_str();
    sub->add_option("--lr-drops", cfg.lr_drop_epochs, "Epochs at which the learning rate is multiplied by --lr-drop-factor")
        ->delimiter(',')
        ->capture_default_str();
    sub->add_option("--lr-drop-factor", cfg.lr_drop_factor, "Learning-rate multiplier at each drop")->capture_default_str();
    if (with_stage) sub->add_option("--alpha", cfg.alpha, "Weight of the refinement loss")->capture_default_str();
    sub->add_option("--tau", cfg.tau, "Refinement temperature")->capture_default_str();
    sub->add_option("--rho", cfg.rho, "Prototype EMA momentum")->capture_default_str();
    if (with_stage) {
      sub->add_option("--seed", cfg.seed, "Seed for initialisation, prototypes and batch order")->capture_default_str();
      sub->add_option("--attention-source", attention, "Where keys/values of the channel attention come from")
          ->check(CLI::IsMember({"cross", "self", "none"}))
          ->capture_default_str();
    }
    sub->add_option("--prm-branch", prm_branch, "Branches that receive the refinement loss")
        ->check(CLI::IsMember({"rgb", "pose", "both"}))
        ->capture_default_str();
    sub->add_flag("--no-prm", no_prm, "Remove the refinement module entirely");
    sub->add_flag("--prm-in-pretraining", cfg.prm_in_pretraining, "Apply the refinement loss in single-branch stages too");
    sub->add_option("--gate", gate, "Gate activation")->check(CLI::IsMember({"sigmoid", "identity"}))->capture_default_str();
    sub->add_option("--stage-channels", stage_channels, "Channels of each backbone stage (both pathways)")
        ->delimiter(',')
        ->capture_default_str();
    sub->add_option("--embed-dim", model.rgb.embed_dim, "Embedding width D")->capture_default_str();
    sub->add_option("--hidden", model.fusion.hidden, "Fusion hidden width C'")->capture_default_str();
    sub->add_option("--lateral-channels", model.fusion.lateral_channels, "Channels passed through lateral connections")
        ->capture_default_str();
    sub->add_option("--norm-groups", model.norm_groups, "Upper bound on group-norm groups")->capture_default_str();
  }

  void resolve() {
    cfg.stage = net::parse_stage(stage);
    cfg.prm_branch = trainer::parse_prm_branch(prm_branch);
    cfg.prm = !no_prm;
    model.fusion.source = xfuse::parse_attention_source(attention);
    model.fusion.gate_activation = xfuse::parse_gate_activation(gate);
    model.pose.embed_dim = model.rgb.embed_dim;
    for (auto* b : {&model.rgb, &model.pose}) {
      b->stage_channels = stage_channels;
      b->temporal_strides.assign(stage_channels.size(), 2);
      b->spatial_strides.assign(stage_channels.size(), 2);
    }
    trainer::validate(cfg);
  }
};

void write_run_manifest(const CLI::App& app, const fs::path& path, const std::string& command,
                        const std::vector<std::string>& artifacts) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# mgc run manifest; reproduce with: mgc --config " << path.string() << " " << command << "\n";
  out << "# git: " << MGC_GIT_DESCRIBE << "\n";
  out << "# started: " << now_utc() << "\n";
  for (const auto& a : artifacts) out << "# artifact: " << a << "\n";
  std::istringstream all(app.config_to_str(true, false));
  for (std::string line; std::getline(all, line);) {
    if (line.rfind(command + ".", 0) == 0) out << line << "\n";
  }
  if (!out) throw IoError("write failed for run_manifest.ini");
}

void append_manifest_note(const fs::path& path, const std::string& note) {
  std::ofstream out(path, std::ios::app);
  out << "# " << note << "\n";
}

std::string pct(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * *v);
  return buf;
}

synthgen::AmbiguousPair parse_pair(const std::string& s) {
  synthgen::AmbiguousPair p;
  char c1 = 0, c2 = 0;
  std::istringstream in(s);
  if (!(in >> p.class_a >> c1 >> p.class_b >> c2 >> p.offset) || c1 != ',' || c2 != ',' || !(in >> std::ws).eof()) {
    throw ValidationError("--ambiguous expects a,b,offset (got '" + s + "')");
  }
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-pathway RGB/pose micro-gesture classifier with cross-modal fusion and prototype refinement"};
  app.set_config("--config", "", "Read options from a key=value file; command-line flags take precedence");
  app.require_subcommand(1);

  // gen
  synthgen::GenConfig gen;
  std::vector<std::string> ambiguous;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--classes", gen.num_classes, "Number of classes K")->capture_default_str();
  gen_cmd->add_option("--train-per-class", gen.train_per_class, "Training clips per class")->capture_default_str();
  gen_cmd->add_option("--val-per-class", gen.val_per_class, "Validation clips per class")->capture_default_str();
  gen_cmd->add_option("--test-per-class", gen.test_per_class, "Test clips per class")->capture_default_str();
  gen_cmd->add_option("--t-rgb", gen.t_rgb, "RGB frames per clip")->capture_default_str();
  gen_cmd->add_option("--t-pose", gen.t_pose, "Pose frames per clip (multiple of --t-rgb)")->capture_default_str();
  gen_cmd->add_option("--height", gen.height, "Frame height")->capture_default_str();
  gen_cmd->add_option("--width", gen.width, "Frame width")->capture_default_str();
  gen_cmd->add_option("--joints", gen.joints, "Number of joints")->capture_default_str();
  gen_cmd->add_option("--ambiguous", ambiguous, "Ambiguous class pair a,b,offset (repeatable)");
  gen_cmd->add_option("--intra-noise", gen.intra_noise, "Per-clip jitter scale")->capture_default_str();
  gen_cmd->add_option("--blob-sigma", gen.blob_sigma, "Joint blob standard deviation in pixels")->capture_default_str();

  // train
  TrainFlags tf;
  std::string train_manifest, train_out, init_rgb, init_pose, resume;
  auto* train_cmd = app.add_subcommand("train", "Train one stage");
  train_cmd->add_option("--manifest", train_manifest, "Dataset manifest")->required();
  train_cmd->add_option("--out", train_out, "Run directory")->required();
  tf.add(train_cmd, true);
  train_cmd->add_option("--init-rgb", init_rgb, "Checkpoint of a trained RGB branch");
  train_cmd->add_option("--init-pose", init_pose, "Checkpoint of a trained pose branch");
  train_cmd->add_option("--resume", resume, "Checkpoint of the same model to start from");

  // eval
  std::string eval_ckpt, eval_manifest, eval_split = "test", eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--split", eval_split, "Split to score")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Directory for predictions_<split>.pred and confusion_<split>.tsv")->required();

  // ensemble
  std::vector<std::string> ens_files;
  std::vector<double> ens_weights;
  std::string ens_out;
  auto* ens_cmd = app.add_subcommand("ensemble", "Average prediction files");
  ens_cmd->add_option("files", ens_files, "Prediction files")->required();
  ens_cmd->add_option("--weights", ens_weights, "One non-negative weight per file (default: equal)")
      ->delimiter(',');
  ens_cmd->add_option("--out", ens_out, "Output prediction file")->required();

  // gradcheck
  gradcheck::Options gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
  gc_cmd->add_option("--seed", gc.seed, "Seed of the random instances")->capture_default_str();
  gc_cmd->add_option("--eps", gc.eps, "Finite-difference step")->capture_default_str();
  gc_cmd->add_option("--tolerance", gc.tolerance, "Maximum accepted relative error")->capture_default_str();
  gc_cmd->add_option("--samples", gc.samples_per_tensor, "Entries probed per tensor")->capture_default_str();

  // report
  std::string rep_run, rep_out;
  auto* rep_cmd = app.add_subcommand("report", "Plot a run directory and summarise it in markdown");
  rep_cmd->add_option("--run", rep_run, "Run directory written by train")->required();
  rep_cmd->add_option("--out", rep_out, "Output directory (default: <run>/report)");

  // compare
  TrainFlags cf;
  std::string cmp_manifest, cmp_out;
  std::vector<std::uint64_t> cmp_seeds{0, 1, 2};
  auto* cmp_cmd = app.add_subcommand("compare", "Test top-1 of CE, CE+PRM and CE+PRM+fusion over several seeds");
  cmp_cmd->add_option("--manifest", cmp_manifest, "Dataset manifest")->required();
  cmp_cmd->add_option("--out", cmp_out, "Output directory")->required();
  cmp_cmd->add_option("--seeds", cmp_seeds, "Training seeds")->capture_default_str();
  cf.add(cmp_cmd, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    if (gen_cmd->parsed()) {
      for (const auto& a : ambiguous)
        if (!a.empty()) gen.ambiguous_pairs.push_back(parse_pair(a));
      synthgen::validate(gen);
      write_run_manifest(app, fs::path(gen_out) / "run_manifest.ini", "gen", {"manifest.txt", "rgb/", "pose/"});
      const auto m = synthgen::generate(gen, gen_out);
      std::cout << "wrote " << m.entries.size() << " clips (" << m.num_classes << " classes) to " << gen_out << "\n";
    } else if (train_cmd->parsed()) {
      tf.resolve();
      trainer::TrainInit init;
      if (!init_rgb.empty()) init.rgb = net::load_checkpoint(init_rgb);
      if (!init_pose.empty()) init.pose = net::load_checkpoint(init_pose);
      if (!resume.empty()) init.resume = net::load_checkpoint(resume);
      const auto manifest = tensorio::load_manifest(train_manifest);
      write_run_manifest(app, fs::path(train_out) / "run_manifest.ini", "train",
                         {"run_record.tsv", "prototype_drift.tsv", "summary.md", "checkpoints/best", "checkpoints/last",
                          "predictions_test.pred", "confusion_test.tsv"});
      const auto t0 = std::chrono::steady_clock::now();
      const auto rec = trainer::train(manifest, tf.cfg, tf.model, init, train_out);
      append_manifest_note(fs::path(train_out) / "run_manifest.ini", "finished: " + now_utc());
      const auto& last = rec.epochs.back();
      std::cout << "epochs " << rec.epochs.size() << ", best epoch " << rec.best_epoch << ", last train top-1 "
                << pct(last.train.fused) << ", val top-1 " << pct(last.val.fused);
      if (rec.test) std::cout << ", test top-1 (best) " << pct(rec.test->fused);
      std::cout << " [" << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s]\n";
    } else if (eval_cmd->parsed()) {
      const auto split = tensorio::parse_split(eval_split);
      const auto res = trainer::evaluate(tensorio::load_manifest(eval_manifest), net::load_checkpoint(eval_ckpt), split);
      write_run_manifest(app, fs::path(eval_out) / "run_manifest.ini", "eval",
                         {"predictions_" + eval_split + ".pred", "confusion_" + eval_split + ".tsv"});
      tensorio::write_predictions(fs::path(eval_out) / ("predictions_" + eval_split + ".pred"), res.predictions);
      trainer::write_confusion(fs::path(eval_out) / ("confusion_" + eval_split + ".tsv"), res.confusion);
      std::cout << eval_split << " top-1: rgb " << pct(res.top1.rgb) << ", pose " << pct(res.top1.pose) << ", fused "
                << pct(res.top1.fused) << "\n";
    } else if (ens_cmd->parsed()) {
      std::vector<tensorio::PredictionFile> files;
      for (const auto& f : ens_files) files.push_back(tensorio::read_predictions(f));
      if (ens_weights.empty()) ens_weights.assign(files.size(), 1.0);
      const auto merged = trainer::ensemble(files, ens_weights);
      write_run_manifest(app, ens_out + ".manifest.ini", "ensemble", {ens_out});
      tensorio::write_predictions(ens_out, merged);
      std::cout << "wrote " << ens_out << "\n";
    } else if (gc_cmd->parsed()) {
      bool ok = true;
      double total = 0.0;
      std::printf("%-16s %14s %8s %9s  %s\n", "suite", "max rel err", "entries", "seconds", "status");
      for (const auto& r : gradcheck::run_all(gc)) {
        std::printf("%-16s %14.3e %8zu %9.3f  %s (worst %s)\n", r.name.c_str(), r.max_rel_error, r.entries, r.seconds,
                    r.passed ? "PASS" : "FAIL", r.worst.c_str());
        ok = ok && r.passed;
        total += r.seconds;
      }
      std::printf("tolerance %.1e, eps %.1e, total %.2f s: %s\n", gc.tolerance, gc.eps, total, ok ? "PASS" : "FAIL");
      return ok ? kOk : kNumerical;
    } else if (rep_cmd->parsed()) {
      const fs::path out = rep_out.empty() ? fs::path(rep_run) / "report" : fs::path(rep_out);
      write_run_manifest(app, out / "run_manifest.ini", "report", {"report.md", "loss.svg", "accuracy.svg"});
      report::write_report(rep_run, out);
      std::cout << "wrote " << (out / "report.md").string() << "\n";
    } else if (cmp_cmd->parsed()) {
      cf.resolve();
      const auto manifest = tensorio::load_manifest(cmp_manifest);
      write_run_manifest(app, fs::path(cmp_out) / "run_manifest.ini", "compare", {"comparison.md"});
      const auto results = trainer::compare(manifest, cf.cfg, cf.model, cmp_seeds, cmp_out);
      const std::string table = trainer::comparison_table(results);
      std::ofstream md(fs::path(cmp_out) / "comparison.md", std::ios::trunc);
      md << "# Mechanism comparison\n\nFused test top-1 (%) of the best-validation checkpoint per run.\n\n" << table;
      if (!md) throw IoError("cannot write comparison.md");
      append_manifest_note(fs::path(cmp_out) / "run_manifest.ini", "finished: " + now_utc());
      std::cout << table;
    }
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  }
  return kOk;
}
