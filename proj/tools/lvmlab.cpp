// lvmlab: desk-scale autoregressive vision model lab.
//
// Every subcommand reads one JSON config (--config) with dataset / model /
// train / experiment sections; flags override the seed and output directory.

#include <CLI11.hpp>

#include <Eigen/Core>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "lvm/config.hpp"
#include "lvm/harness.hpp"
#include "lvm/infer.hpp"
#include "lvm/rng.hpp"

namespace fs = std::filesystem;
using namespace lvm;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("--config", common.config_path, "JSON config file");
  cmd->add_option("--out-dir", common.out_dir, "output directory");
  cmd->add_option("--seed", common.seed, "override the run seed")
      ->each([&common](const std::string&) { common.seed_set = true; });
  cmd->add_option("--threads", common.threads, "kernel thread cap (recorded; kernels are deterministic)");
}

ExperimentConfig load_config(const Common& common) {
  ExperimentConfig cfg;
  if (!common.config_path.empty()) cfg = ExperimentConfig::from_file(common.config_path);
  if (common.seed_set) {
    cfg.train.seed = common.seed;
    cfg.experiment["seed"] = common.seed;
    cfg.experiment["seeds"] = {common.seed, common.seed + 1, common.seed + 2};
  }
  Eigen::setNbThreads(common.threads);
  fs::create_directories(common.out_dir);
  return cfg;
}

std::string out_path(const Common& common, const std::string& name) {
  return (fs::path(common.out_dir) / name).string();
}

void print_records(const std::string& label, const std::vector<EvalRecord>& records) {
  std::printf("%s\n", label.c_str());
  std::printf("  %-12s %10s %10s %12s\n", "task", "loss", "accuracy", "perplexity");
  for (const auto& r : records) {
    std::printf("  %-12s %10.4f %9.2f%% %12.2f\n", task_name(r.task), r.loss, r.accuracy,
                r.perplexity);
  }
}

struct TrainedArtifacts {
  DataBundle bundle;
  std::vector<VisualSentence> train_sentences;
  std::vector<VisualSentence> val_sentences;
};

TrainedArtifacts build_artifacts(const ExperimentConfig& cfg) {
  TrainedArtifacts art{prepare_data(cfg.dataset), {}, {}};
  art.train_sentences = build_sentences(art.bundle.train, art.bundle.codebook,
                                        cfg.dataset.context_length, true,
                                        derive_seed(cfg.dataset.seed, 0x5E11));
  art.val_sentences = build_sentences(art.bundle.val, art.bundle.codebook,
                                      cfg.dataset.context_length, true,
                                      derive_seed(cfg.dataset.seed, 0x7A11));
  return art;
}

void save_run(const std::string& path, const ExperimentConfig& cfg, const ModelConfig& mcfg,
              const Codebook& cb, ModelParameters<float>& params, OptimizerState& state) {
  Checkpoint ckpt;
  ckpt.model = mcfg;
  ckpt.train = cfg.train;
  ckpt.codebook = cb;
  ckpt.params = params;
  ckpt.optimizer = state;
  ckpt.rng_state = Rng(cfg.train.seed).state();
  ckpt.step = static_cast<std::uint64_t>(state.step);
  save_checkpoint(path, ckpt);
  std::printf("checkpoint written to %s\n", path.c_str());
}

int cmd_gen_data(const Common& common) {
  const ExperimentConfig cfg = load_config(common);
  const DataBundle bundle = prepare_data(cfg.dataset);
  write_manifest(out_path(common, "train_manifest.jsonl"), bundle.train);
  write_manifest(out_path(common, "val_manifest.jsonl"), bundle.val);
  write_codebook(out_path(common, "codebook.devq"), bundle.codebook);
  for (const TaskId task : bundle.train.tasks()) {
    const auto sentences =
        build_sentences(manifest_subset(bundle.train, task), bundle.codebook,
                        cfg.dataset.context_length, false, 0);
    write_token_cache(out_path(common, std::string("tokens_") + task_name(task) + ".detk"),
                      sentences);
    const SamplePair sample = materialize(bundle.train.entries[0], cfg.dataset.image_size);
    write_ppm(out_path(common, std::string("sample_") + task_name(task) + ".ppm"),
              contact_sheet({sample.input, sample.annotation}));
  }
  std::printf("data written to %s\n", common.out_dir.c_str());
  return 0;
}

int cmd_tokenizer_fit(const Common& common) {
  const ExperimentConfig cfg = load_config(common);
  const DataBundle bundle = prepare_data(cfg.dataset);
  const std::string path = out_path(common, "codebook.devq");
  write_codebook(path, bundle.codebook);
  std::printf("codebook (K=%d, dim=%d, patch=%d) written to %s\n", bundle.codebook.k,
              bundle.codebook.dim, bundle.codebook.patch, path.c_str());
  return 0;
}

int cmd_train(const Common& common, const std::string& resume) {
  const ExperimentConfig cfg = load_config(common);
  TrainedArtifacts art = build_artifacts(cfg);
  ModelConfig mcfg = bind_model(cfg.model, cfg.dataset);

  ModelParameters<float> params;
  OptimizerState state;
  TrainConfig tcfg = cfg.train;
  if (!resume.empty()) {
    Checkpoint ckpt = load_checkpoint(resume);
    params = ckpt.params;
    mcfg = ckpt.model;
    tcfg = ckpt.train;
    state = ckpt.optimizer.value_or(make_optimizer_state(params));
    std::printf("resuming from step %lld\n", static_cast<long long>(state.step));
  } else {
    params = init_params<float>(mcfg, tcfg.seed);
    state = make_optimizer_state(params);
  }

  MetricsWriter metrics(out_path(common, "metrics.csv"));
  const auto records =
      run_training(params, state, tcfg, art.bundle.codebook, art.train_sentences,
                   art.val_sentences, nullptr, &metrics,
                   std::max<std::int64_t>(tcfg.total_steps / 10, 1));
  print_records("validation after " + std::to_string(state.step) + " steps:", records);
  save_run(out_path(common, "model.ckpt"), cfg, mcfg, art.bundle.codebook, params, state);
  return 0;
}

int cmd_distill(const Common& common, const std::string& teacher_path) {
  ExperimentConfig cfg = load_config(common);
  if (!cfg.train.kd.has_value()) cfg.train.kd = KdConfig{};
  if (!teacher_path.empty()) cfg.train.kd->teacher_checkpoint = teacher_path;
  if (cfg.train.kd->teacher_checkpoint.empty()) {
    std::fprintf(stderr, "distill: no teacher checkpoint (use --teacher or train.kd config)\n");
    return 1;
  }
  Checkpoint teacher_ckpt = load_checkpoint(cfg.train.kd->teacher_checkpoint);

  // the teacher's codebook is the tokenizer of record for the student
  TrainedArtifacts art;
  art.bundle.codebook = teacher_ckpt.codebook;
  art.bundle.train = make_manifest(cfg.dataset.tasks, cfg.dataset.seed, cfg.dataset.image_size,
                                   cfg.dataset.tokens_per_image());
  std::vector<TaskSpec> val_tasks = cfg.dataset.tasks;
  for (auto& t : val_tasks) t.count = cfg.dataset.val_count;
  art.bundle.val = make_manifest(val_tasks, derive_seed(cfg.dataset.seed, 0xFA11DEAD),
                                 cfg.dataset.image_size, cfg.dataset.tokens_per_image());
  art.train_sentences = build_sentences(art.bundle.train, art.bundle.codebook,
                                        cfg.dataset.context_length, true,
                                        derive_seed(cfg.dataset.seed, 0x5E11));
  art.val_sentences = build_sentences(art.bundle.val, art.bundle.codebook,
                                      cfg.dataset.context_length, true,
                                      derive_seed(cfg.dataset.seed, 0x7A11));

  ModelConfig mcfg = bind_model(cfg.model, cfg.dataset);
  ModelParameters<float> params = init_params<float>(mcfg, cfg.train.seed);
  OptimizerState state = make_optimizer_state(params);
  MetricsWriter metrics(out_path(common, "metrics.csv"));
  const auto records =
      run_training(params, state, cfg.train, art.bundle.codebook, art.train_sentences,
                   art.val_sentences, &teacher_ckpt.params, &metrics,
                   std::max<std::int64_t>(cfg.train.total_steps / 10, 1));
  print_records("distilled student validation:", records);
  save_run(out_path(common, "student.ckpt"), cfg, mcfg, art.bundle.codebook, params, state);
  return 0;
}

int cmd_eval(const Common& common, const std::string& ckpt_path) {
  const ExperimentConfig cfg = load_config(common);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  std::vector<TaskSpec> val_tasks = cfg.dataset.tasks;
  for (auto& t : val_tasks) t.count = cfg.dataset.val_count;
  const DatasetManifest val = make_manifest(val_tasks, derive_seed(cfg.dataset.seed, 0xFA11DEAD),
                                            cfg.dataset.image_size, cfg.dataset.tokens_per_image());
  const auto sentences = build_sentences(val, ckpt.codebook, cfg.dataset.context_length, true,
                                         derive_seed(cfg.dataset.seed, 0x7A11));
  const auto records = evaluate(ckpt.params, sentences, ckpt.codebook);
  print_records("validation (" + ckpt_path + "):", records);
  MetricsWriter metrics(out_path(common, "metrics.csv"));
  for (const auto& r : records) {
    metrics.append(static_cast<std::int64_t>(ckpt.step), "val", task_name(r.task), r.loss,
                   r.accuracy, r.perplexity, 0.0, 0);
  }
  return 0;
}

int cmd_generate(const Common& common, const std::string& ckpt_path, const std::string& task_name_s,
                 int n_examples, int query_index, double temperature, bool sample) {
  const ExperimentConfig cfg = load_config(common);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const TaskId task = task_from_name(task_name_s);

  Prompt prompt;
  const std::uint64_t base = derive_seed(cfg.dataset.seed, 0x1000u + static_cast<std::uint64_t>(task));
  for (int i = 0; i < n_examples; ++i) {
    ManifestEntry e;
    e.task = task;
    e.source_seed = derive_seed(base, static_cast<std::uint64_t>(i));
    prompt.examples.push_back(materialize(e, cfg.dataset.image_size));
  }
  ManifestEntry q;
  q.task = task;
  q.source_seed = derive_seed(derive_seed(cfg.dataset.seed, 0xFA11DEAD),
                              static_cast<std::uint64_t>(query_index));
  const SamplePair query = materialize(q, cfg.dataset.image_size);
  prompt.query = query.input;

  DecodeOptions opts;
  if (sample) {
    opts.mode = DecodeMode::temperature;
    opts.temperature = temperature;
    opts.seed = cfg.train.seed;
  }
  const Image out = prompted_inference(ckpt.params, ckpt.codebook, prompt, opts);

  std::vector<Image> sheet;
  for (const auto& ex : prompt.examples) {
    sheet.push_back(ex.input);
    sheet.push_back(ex.annotation);
  }
  sheet.push_back(prompt.query);
  sheet.push_back(out);
  const std::string path = out_path(common, "generate_" + task_name_s + ".ppm");
  write_ppm(path, contact_sheet(sheet));
  std::printf("prompted output written to %s\n", path.c_str());
  return 0;
}

int cmd_inpaint(const Common& common, const std::string& ckpt_path, const std::string& task_name_s,
                int index, int keep) {
  const ExperimentConfig cfg = load_config(common);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const TaskId task = task_from_name(task_name_s);
  ManifestEntry e;
  e.task = task;
  e.source_seed = derive_seed(derive_seed(cfg.dataset.seed, 0xFA11DEAD),
                              static_cast<std::uint64_t>(index));
  const SamplePair pair = materialize(e, cfg.dataset.image_size);
  const int tpi = tokens_per_image(ckpt.codebook, pair.input.height, pair.input.width);
  if (keep <= 0) keep = tpi / 2;  // drop the second half, mirroring 128-of-256
  const Image out = inpaint(ckpt.params, ckpt.codebook, pair.input, keep);
  const std::string path = out_path(common, "inpaint_" + task_name_s + ".ppm");
  write_ppm(path, contact_sheet({pair.input, out}));
  std::printf("inpainted image (kept %d of %d tokens) written to %s\n", keep, tpi, path.c_str());
  return 0;
}

int cmd_balance(const Common& common) {
  const ExperimentConfig cfg = load_config(common);
  const auto outcomes = run_balance(cfg, common.out_dir);
  for (const auto& o : outcomes) {
    print_records("mode=" + o.mode + " seed=" + std::to_string(o.seed) + ":", o.records);
  }
  std::printf("\n%s\n", render_csv_table(out_path(common, "balance.csv")).c_str());
  return 0;
}

int cmd_kd(const Common& common) {
  const ExperimentConfig cfg = load_config(common);
  const auto outcomes = run_kd(cfg, common.out_dir);
  for (const auto& o : outcomes) {
    print_records("seed=" + std::to_string(o.seed) + " teacher:", o.teacher);
    print_records("seed=" + std::to_string(o.seed) + " student (scratch):", o.student_scratch);
    print_records("seed=" + std::to_string(o.seed) + " student (distilled):", o.student_kd);
  }
  std::printf("\n%s\n", render_csv_table(out_path(common, "kd.csv")).c_str());
  return 0;
}

int cmd_continual(const Common& common, const std::string& scheme) {
  const ExperimentConfig cfg = load_config(common);
  std::vector<std::string> schemes;
  if (scheme == "both") {
    schemes = {"continuous", "rescaled"};
  } else {
    schemes = {scheme};
  }
  for (const auto& s : schemes) {
    const ContinualOutcome outcome = run_continual(cfg, s, common.out_dir);
    std::printf("scheme=%s\n", s.c_str());
    for (std::size_t row = 0; row < outcome.matrix.rows.size(); ++row) {
      print_records("  after stage " + std::to_string(row) + " (" +
                        task_name(outcome.matrix.stage_order[row]) + "):",
                    outcome.matrix.rows[row]);
    }
    std::printf("\n%s\n", render_csv_table(out_path(common, "continual_" + s + ".csv")).c_str());
  }
  return 0;
}

int cmd_scaling(const Common& common) {
  const ExperimentConfig cfg = load_config(common);
  run_scaling(cfg, common.out_dir);
  std::printf("%s\n", render_csv_table(out_path(common, "scaling.csv")).c_str());
  return 0;
}

int cmd_foreground(const Common& common) {
  const ExperimentConfig cfg = load_config(common);
  const auto outcomes = run_foreground(cfg, common.out_dir);
  for (const auto& o : outcomes) {
    std::printf("seed=%llu  ceiling mIoU=%.4f  base mIoU=%.4f  finetuned mIoU=%.4f\n",
                static_cast<unsigned long long>(o.seed), o.ceiling_miou, o.base_miou,
                o.finetuned_miou);
  }
  return 0;
}

int cmd_report(const Common& common, const std::string& csv, const std::string& plot,
               int x_col, const std::vector<int>& y_cols) {
  std::printf("%s\n", render_csv_table(csv).c_str());
  if (!plot.empty()) {
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    std::vector<double> xs;
    std::vector<std::vector<double>> series(y_cols.size());
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::vector<std::string> cells;
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      try {
        const double x = std::stod(cells.at(static_cast<std::size_t>(x_col)));
        std::vector<double> ys;
        for (const int c : y_cols) ys.push_back(std::stod(cells.at(static_cast<std::size_t>(c))));
        xs.push_back(x);
        for (std::size_t i = 0; i < ys.size(); ++i) series[i].push_back(ys[i]);
      } catch (const std::exception&) {
        continue;  // non-numeric row
      }
    }
    write_line_plot((fs::path(common.out_dir) / plot).string(), xs, series);
    std::printf("plot written to %s\n", (fs::path(common.out_dir) / plot).string().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale autoregressive vision model lab"};
  app.require_subcommand(1);

  Common common;
  std::string resume, teacher, ckpt, task = "seg-toy", scheme = "both", csv, plot;
  int n_examples = 3, query_index = 0, keep = 0, x_col = 1;
  double temperature = 1.0;
  bool sample = false;
  std::vector<int> y_cols{3};

  auto* gen_data = app.add_subcommand("gen-data", "generate manifests, codebook and token caches");
  add_common(gen_data, common);

  auto* tok = app.add_subcommand("tokenizer-fit", "fit and write the patch codebook");
  add_common(tok, common);

  auto* train = app.add_subcommand("train", "next-token training run");
  add_common(train, common);
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* distill = app.add_subcommand("distill", "train a student against a teacher checkpoint");
  add_common(distill, common);
  distill->add_option("--teacher", teacher, "teacher checkpoint path");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint path")->required();

  auto* gen = app.add_subcommand("generate", "prompted image-to-image inference");
  add_common(gen, common);
  gen->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  gen->add_option("--task", task, "seg-toy | pose-toy | derain-toy");
  gen->add_option("--examples", n_examples, "example pairs in the prompt");
  gen->add_option("--query", query_index, "held-out query index");
  gen->add_flag("--sample", sample, "temperature sampling instead of greedy");
  gen->add_option("--temperature", temperature, "sampling temperature");

  auto* inp = app.add_subcommand("inpaint", "regenerate the tail tokens of an image");
  add_common(inp, common);
  inp->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  inp->add_option("--task", task, "source task");
  inp->add_option("--query", query_index, "held-out image index");
  inp->add_option("--keep", keep, "tokens kept (default half)");

  auto* bal = app.add_subcommand("balance", "long-tail balancing study");
  add_common(bal, common);

  auto* kd = app.add_subcommand("kd", "knowledge distillation study");
  add_common(kd, common);

  auto* cont = app.add_subcommand("continual", "ordered-task forgetting study");
  add_common(cont, common);
  cont->add_option("--scheme", scheme, "continuous | rescaled | both");

  auto* scal = app.add_subcommand("scaling", "data fraction / augmentation scaling study");
  add_common(scal, common);

  auto* fg = app.add_subcommand("foreground", "foreground segmentation mIoU study");
  add_common(fg, common);

  auto* rep = app.add_subcommand("report", "render a CSV as a table and optional plot");
  add_common(rep, common);
  rep->add_option("--csv", csv, "CSV file")->required();
  rep->add_option("--plot", plot, "output PPM plot name");
  rep->add_option("--x-col", x_col, "x column index");
  rep->add_option("--y-cols", y_cols, "y column indices");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_data->parsed()) return cmd_gen_data(common);
    if (tok->parsed()) return cmd_tokenizer_fit(common);
    if (train->parsed()) return cmd_train(common, resume);
    if (distill->parsed()) return cmd_distill(common, teacher);
    if (eval_cmd->parsed()) return cmd_eval(common, ckpt);
    if (gen->parsed()) return cmd_generate(common, ckpt, task, n_examples, query_index, temperature, sample);
    if (inp->parsed()) return cmd_inpaint(common, ckpt, task, query_index, keep);
    if (bal->parsed()) return cmd_balance(common);
    if (kd->parsed()) return cmd_kd(common);
    if (cont->parsed()) return cmd_continual(common, scheme);
    if (scal->parsed()) return cmd_scaling(common);
    if (fg->parsed()) return cmd_foreground(common);
    if (rep->parsed()) return cmd_report(common, csv, plot, x_col, y_cols);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
