#include "lvm/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "lvm/rng.hpp"

namespace lvm {

namespace fs = std::filesystem;

namespace {

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

const EvalRecord& record_for(const std::vector<EvalRecord>& records, TaskId task) {
  for (const auto& r : records) {
    if (r.task == task) return r;
  }
  throw std::runtime_error(std::string("no eval record for task ") + task_name(task));
}

std::vector<std::uint64_t> experiment_seeds(const nlohmann::json& experiment) {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  if (experiment.contains("seeds")) {
    seeds = experiment.at("seeds").get<std::vector<std::uint64_t>>();
  }
  if (seeds.empty()) throw std::runtime_error("experiment: seeds must not be empty");
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (std::size_t j = i + 1; j < seeds.size(); ++j) {
      if (seeds[i] == seeds[j]) throw std::runtime_error("experiment: seeds must be distinct");
    }
  }
  return seeds;
}

}  // namespace

DataBundle prepare_data(const DatasetConfig& cfg) {
  cfg.validate();
  DataBundle bundle;
  bundle.train = make_manifest(cfg.tasks, cfg.seed, cfg.image_size, cfg.tokens_per_image());

  std::vector<TaskSpec> val_tasks = cfg.tasks;
  for (auto& t : val_tasks) t.count = cfg.val_count;
  bundle.val = make_manifest(val_tasks, derive_seed(cfg.seed, 0xFA11DEAD), cfg.image_size,
                             cfg.tokens_per_image());

  // tokenizer fit: an even share of original pairs per task, both images each
  const int per_task =
      std::max(1, cfg.codebook_fit_samples / static_cast<int>(cfg.tasks.size()));
  std::vector<Image> fit_images;
  for (const auto& spec : cfg.tasks) {
    const DatasetManifest sub = manifest_subset(bundle.train, spec.task);
    const int take = std::min<int>(per_task, static_cast<int>(sub.entries.size()));
    for (int i = 0; i < take; ++i) {
      SamplePair pair = materialize(sub.entries[static_cast<std::size_t>(i)], cfg.image_size);
      fit_images.push_back(std::move(pair.input));
      fit_images.push_back(std::move(pair.annotation));
    }
  }
  bundle.codebook = fit_codebook(fit_images, cfg.codebook_k, cfg.patch, cfg.codebook_iters,
                                 derive_seed(cfg.seed, 0xC0DEB00C));
  return bundle;
}

ModelConfig bind_model(ModelConfig model, const DatasetConfig& data) {
  model.vocab_size = data.codebook_k;
  model.code_dim = data.patch * data.patch * 3;
  model.context_length = data.context_length;
  model.validate();
  return model;
}

std::vector<EvalRecord> run_training(ModelParameters<float>& params, OptimizerState& state,
                                     const TrainConfig& cfg, const Codebook& cb,
                                     const std::vector<VisualSentence>& train_sentences,
                                     const std::vector<VisualSentence>& val_sentences,
                                     ModelParameters<float>* teacher, MetricsWriter* metrics,
                                     std::int64_t eval_every) {
  cfg.validate();
  if (train_sentences.empty()) throw std::invalid_argument("run_training: no train sentences");
  const int context = static_cast<int>(train_sentences[0].tokens.size());
  if (cfg.micro_batch_tokens % context != 0) {
    throw std::invalid_argument("run_training: micro_batch_tokens " +
                                std::to_string(cfg.micro_batch_tokens) +
                                " not divisible by context " + std::to_string(context));
  }
  const std::int64_t spm = cfg.micro_batch_tokens / context;  // sentences per micro-batch
  const std::int64_t n = static_cast<std::int64_t>(train_sentences.size());
  if (n < spm) {
    throw std::invalid_argument("run_training: micro batch needs " + std::to_string(spm) +
                                " sentences but only " + std::to_string(n) + " available");
  }
  const std::int64_t micro_per_epoch = n / spm;
  const std::int64_t end_step = cfg.schedule_offset + cfg.total_steps;

  std::vector<std::uint32_t> order;
  std::int64_t order_epoch = -1;
  auto epoch_order = [&](std::int64_t epoch) {
    order.resize(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0u);
    Rng rng(derive_seed(cfg.seed, 0xE70C0000u + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
  };

  LossReport last;
  while (state.step < end_step) {
    const std::int64_t micro_done =
        (state.step - cfg.schedule_offset) * cfg.grad_accum_steps + state.micro_in_flight;
    const std::int64_t epoch = micro_done / micro_per_epoch;
    const std::int64_t offset = (micro_done % micro_per_epoch) * spm;
    if (epoch != order_epoch) {
      epoch_order(epoch);
      order_epoch = epoch;
    }
    std::vector<const VisualSentence*> chunk;
    chunk.reserve(static_cast<std::size_t>(spm));
    for (std::int64_t i = 0; i < spm; ++i) {
      chunk.push_back(&train_sentences[order[static_cast<std::size_t>(offset + i)]]);
    }
    const TokenBatch batch = pack_batch(chunk);
    last = teacher ? distill_step(params, *teacher, batch, state, cfg, cb)
                   : train_step(params, batch, state, cfg, cb);

    if (last.stepped && metrics && eval_every > 0 &&
        (state.step % eval_every == 0 || state.step == end_step)) {
      const std::int64_t tokens_seen = state.step * cfg.equivalent_batch_tokens;
      metrics->append(state.step, "train", "all", last.loss, last.accuracy,
                      std::exp(last.loss), last.lr, tokens_seen);
      for (const auto& rec : evaluate(params, val_sentences, cb)) {
        metrics->append(state.step, "val", task_name(rec.task), rec.loss, rec.accuracy,
                        rec.perplexity, last.lr, tokens_seen);
      }
    }
  }

  std::vector<EvalRecord> final_eval = evaluate(params, val_sentences, cb);
  if (metrics) {
    const std::int64_t tokens_seen = state.step * cfg.equivalent_batch_tokens;
    for (const auto& rec : final_eval) {
      metrics->append(state.step, "val", task_name(rec.task), rec.loss, rec.accuracy,
                      rec.perplexity, last.lr, tokens_seen);
    }
  }
  return final_eval;
}

// --- balance -----------------------------------------------------------------

std::vector<BalanceOutcome> run_balance(const ExperimentConfig& cfg, const std::string& out_dir) {
  reject_unknown_keys(cfg.experiment, {"kind", "modes", "seeds"}, "balance experiment");
  std::vector<std::string> modes{"unbalanced", "resample", "augment"};
  if (cfg.experiment.contains("modes")) {
    modes = cfg.experiment.at("modes").get<std::vector<std::string>>();
  }
  const std::vector<std::uint64_t> seeds = experiment_seeds(cfg.experiment);
  ensure_dir(out_dir);

  const DataBundle bundle = prepare_data(cfg.dataset);
  const std::vector<VisualSentence> val_sentences =
      build_sentences(bundle.val, bundle.codebook, cfg.dataset.context_length, true,
                      derive_seed(cfg.dataset.seed, 0x7A11));

  std::ofstream csv(join_path(out_dir, "balance.csv"));
  csv << "mode,seed,task,loss,accuracy,perplexity,train_tokens\n";

  std::vector<BalanceOutcome> outcomes;
  for (const auto& mode : modes) {
    DatasetManifest manifest = bundle.train;
    if (mode == "resample") {
      manifest = balance_by_resampling(manifest);
    } else if (mode == "augment") {
      manifest = balance_by_augmentation(manifest, derive_seed(cfg.dataset.seed, 0xA7651));
    } else if (mode != "unbalanced") {
      throw std::runtime_error("balance: unknown mode '" + mode + "'");
    }
    const std::vector<VisualSentence> train_sentences =
        build_sentences(manifest, bundle.codebook, cfg.dataset.context_length, true,
                        derive_seed(cfg.dataset.seed, 0x5E11));

    for (const std::uint64_t seed : seeds) {
      ModelConfig mcfg = bind_model(cfg.model, cfg.dataset);
      ModelParameters<float> params = init_params<float>(mcfg, seed);
      OptimizerState state = make_optimizer_state(params);
      TrainConfig tcfg = cfg.train;
      tcfg.seed = seed;
      MetricsWriter metrics(join_path(out_dir, "metrics_" + mode + "_s" + std::to_string(seed) + ".csv"));

      BalanceOutcome outcome;
      outcome.mode = mode;
      outcome.seed = seed;
      outcome.records = run_training(params, state, tcfg, bundle.codebook, train_sentences,
                                     val_sentences, nullptr, &metrics,
                                     std::max<std::int64_t>(tcfg.total_steps / 8, 1));
      for (const auto& rec : outcome.records) {
        csv << mode << "," << seed << "," << task_name(rec.task) << "," << rec.loss << ","
            << rec.accuracy << "," << rec.perplexity << "," << manifest.token_count(rec.task)
            << "\n";
      }
      csv.flush();
      outcomes.push_back(std::move(outcome));
    }
  }
  return outcomes;
}

// --- knowledge distillation ------------------------------------------------------

std::vector<KdOutcome> run_kd(const ExperimentConfig& cfg, const std::string& out_dir) {
  reject_unknown_keys(cfg.experiment, {"kind", "seeds", "teacher_model", "teacher_steps"},
                      "kd experiment");
  const std::vector<std::uint64_t> seeds = experiment_seeds(cfg.experiment);
  std::string teacher_name = "tiny-2x";
  if (cfg.experiment.contains("teacher_model")) {
    teacher_name = cfg.experiment.at("teacher_model").get<std::string>();
  }
  std::int64_t teacher_steps = cfg.train.total_steps;
  if (cfg.experiment.contains("teacher_steps")) {
    teacher_steps = cfg.experiment.at("teacher_steps").get<std::int64_t>();
  }
  ensure_dir(out_dir);

  const DataBundle bundle = prepare_data(cfg.dataset);
  // Table-3 setting: the multi-task mixture balanced by augmentation
  const DatasetManifest manifest =
      balance_by_augmentation(bundle.train, derive_seed(cfg.dataset.seed, 0xA7651));
  const std::vector<VisualSentence> train_sentences =
      build_sentences(manifest, bundle.codebook, cfg.dataset.context_length, true,
                      derive_seed(cfg.dataset.seed, 0x5E11));
  const std::vector<VisualSentence> val_sentences =
      build_sentences(bundle.val, bundle.codebook, cfg.dataset.context_length, true,
                      derive_seed(cfg.dataset.seed, 0x7A11));

  std::ofstream csv(join_path(out_dir, "kd.csv"));
  csv << "seed,model,kd,task,loss,accuracy,perplexity\n";
  auto emit = [&](std::uint64_t seed, const std::string& model, bool kd,
                  const std::vector<EvalRecord>& records) {
    for (const auto& rec : records) {
      csv << seed << "," << model << "," << (kd ? 1 : 0) << "," << task_name(rec.task) << ","
          << rec.loss << "," << rec.accuracy << "," << rec.perplexity << "\n";
    }
    csv.flush();
  };

  std::vector<KdOutcome> outcomes;
  for (const std::uint64_t seed : seeds) {
    KdOutcome outcome;
    outcome.seed = seed;

    const ModelConfig teacher_cfg = bind_model(named_config(teacher_name), cfg.dataset);
    ModelParameters<float> teacher = init_params<float>(teacher_cfg, derive_seed(seed, 0x7EAC));
    {
      OptimizerState state = make_optimizer_state(teacher);
      TrainConfig tcfg = cfg.train;
      tcfg.total_steps = teacher_steps;
      tcfg.seed = derive_seed(seed, 1);
      tcfg.kd.reset();
      outcome.teacher = run_training(teacher, state, tcfg, bundle.codebook, train_sentences,
                                     val_sentences);
      Checkpoint ckpt;
      ckpt.model = teacher_cfg;
      ckpt.train = tcfg;
      ckpt.codebook = bundle.codebook;
      ckpt.params = teacher;
      ckpt.rng_state = Rng(tcfg.seed).state();
      ckpt.step = static_cast<std::uint64_t>(state.step);
      outcome.teacher_checkpoint = join_path(out_dir, "teacher_s" + std::to_string(seed) + ".ckpt");
      save_checkpoint(outcome.teacher_checkpoint, ckpt);
    }
    emit(seed, teacher_name, false, outcome.teacher);

    const ModelConfig student_cfg = bind_model(cfg.model, cfg.dataset);
    // scratch and distilled students share init seed and batch order
    {
      ModelParameters<float> student = init_params<float>(student_cfg, seed);
      OptimizerState state = make_optimizer_state(student);
      TrainConfig tcfg = cfg.train;
      tcfg.seed = derive_seed(seed, 2);
      tcfg.kd.reset();
      outcome.student_scratch = run_training(student, state, tcfg, bundle.codebook,
                                             train_sentences, val_sentences);
    }
    emit(seed, "student", false, outcome.student_scratch);

    {
      ModelParameters<float> student = init_params<float>(student_cfg, seed);
      OptimizerState state = make_optimizer_state(student);
      TrainConfig tcfg = cfg.train;
      tcfg.seed = derive_seed(seed, 2);
      if (!tcfg.kd.has_value()) tcfg.kd = KdConfig{};
      tcfg.kd->teacher_checkpoint = outcome.teacher_checkpoint;
      outcome.student_kd = run_training(student, state, tcfg, bundle.codebook, train_sentences,
                                        val_sentences, &teacher);
    }
    emit(seed, "student", true, outcome.student_kd);

    outcomes.push_back(std::move(outcome));
  }
  return outcomes;
}

// --- continual learning -------------------------------------------------------------

std::vector<std::pair<double, double>> continual_stage_lrs(const TrainConfig& cfg,
                                                           std::size_t n_stages,
                                                           std::int64_t steps_per_stage) {
  std::vector<std::pair<double, double>> stage_lrs;
  if (n_stages == 3) {
    // stage boundaries as fixed fractions of peak: at the default
    // 1.5e-4 -> 1.5e-5 schedule these are exactly 8e-5 and 5e-5
    const double peak = cfg.peak_lr;
    stage_lrs = {{peak, peak * (8.0 / 15.0)},
                 {peak * (8.0 / 15.0), peak * (1.0 / 3.0)},
                 {peak * (1.0 / 3.0), peak * 0.1}};
  } else {
    TrainConfig global = cfg;
    global.schedule_offset = 0;
    global.total_steps = steps_per_stage * static_cast<std::int64_t>(n_stages);
    for (std::size_t s = 0; s < n_stages; ++s) {
      stage_lrs.emplace_back(
          cosine_lr(static_cast<std::int64_t>(s) * steps_per_stage, global),
          cosine_lr(static_cast<std::int64_t>(s + 1) * steps_per_stage, global));
    }
  }
  return stage_lrs;
}

ContinualOutcome run_continual(const ExperimentConfig& cfg, const std::string& scheme,
                               const std::string& out_dir) {
  reject_unknown_keys(cfg.experiment,
                      {"kind", "order", "scheme", "steps_per_stage", "stage_lrs", "seed"},
                      "continual experiment");
  std::vector<TaskId> order{TaskId::seg_toy, TaskId::pose_toy, TaskId::derain_toy};
  if (cfg.experiment.contains("order")) {
    order.clear();
    for (const auto& name : cfg.experiment.at("order")) {
      order.push_back(task_from_name(name.get<std::string>()));
    }
  }
  std::int64_t steps_per_stage = cfg.train.total_steps;
  if (cfg.experiment.contains("steps_per_stage")) {
    steps_per_stage = cfg.experiment.at("steps_per_stage").get<std::int64_t>();
  }
  std::uint64_t seed = 1;
  if (cfg.experiment.contains("seed")) seed = cfg.experiment.at("seed").get<std::uint64_t>();
  ensure_dir(out_dir);

  const std::size_t n_stages = order.size();
  std::vector<std::pair<double, double>> stage_lrs;
  if (cfg.experiment.contains("stage_lrs")) {
    for (const auto& seg : cfg.experiment.at("stage_lrs")) {
      stage_lrs.emplace_back(seg.at(0).get<double>(), seg.at(1).get<double>());
    }
    if (stage_lrs.size() != n_stages) {
      throw std::runtime_error("continual: stage_lrs size does not match task order");
    }
  } else {
    stage_lrs = continual_stage_lrs(cfg.train, n_stages, steps_per_stage);
  }

  const DataBundle bundle = prepare_data(cfg.dataset);
  const std::vector<VisualSentence> val_sentences =
      build_sentences(bundle.val, bundle.codebook, cfg.dataset.context_length, true,
                      derive_seed(cfg.dataset.seed, 0x7A11));
  // ordered, unshuffled per-task blocks
  std::vector<std::vector<VisualSentence>> stage_sentences;
  for (const TaskId task : order) {
    stage_sentences.push_back(build_sentences(manifest_subset(bundle.train, task),
                                              bundle.codebook, cfg.dataset.context_length,
                                              false, 0));
  }

  ContinualOutcome outcome;
  outcome.scheme = scheme;
  outcome.matrix.stage_order = order;
  outcome.matrix.eval_tasks = bundle.val.tasks();

  ModelConfig mcfg = bind_model(cfg.model, cfg.dataset);
  ModelParameters<float> params = init_params<float>(mcfg, seed);
  OptimizerState state = make_optimizer_state(params);

  std::ofstream csv(join_path(out_dir, "continual_" + scheme + ".csv"));
  csv << "scheme,stage,stage_task,eval_task,loss,accuracy,perplexity\n";
  MetricsWriter metrics(join_path(out_dir, "metrics_continual_" + scheme + ".csv"));

  for (std::size_t s = 0; s < n_stages; ++s) {
    TrainConfig tcfg = cfg.train;
    tcfg.total_steps = steps_per_stage;
    tcfg.seed = derive_seed(seed, 0x57A6E + s);
    if (scheme == "continuous") {
      tcfg.schedule_offset = static_cast<std::int64_t>(s) * steps_per_stage;
      if (s == 0) {
        // warmup then cosine down to the first boundary
        tcfg.peak_lr = stage_lrs[0].first;
        tcfg.final_lr = stage_lrs[0].second;
      } else {
        tcfg.lr_segment = stage_lrs[s];
      }
    } else if (scheme == "rescaled") {
      // full schedule restarted every stage
      tcfg.schedule_offset = static_cast<std::int64_t>(s) * steps_per_stage;
    } else {
      throw std::runtime_error("continual: unknown scheme '" + scheme + "'");
    }

    std::vector<EvalRecord> records =
        run_training(params, state, tcfg, bundle.codebook, stage_sentences[s], val_sentences,
                     nullptr, &metrics, std::max<std::int64_t>(steps_per_stage / 4, 1));
    for (const auto& rec : records) {
      csv << scheme << "," << s << "," << task_name(order[s]) << "," << task_name(rec.task)
          << "," << rec.loss << "," << rec.accuracy << "," << rec.perplexity << "\n";
    }
    csv.flush();
    outcome.matrix.rows.push_back(std::move(records));
  }
  return outcome;
}

// --- data scaling ----------------------------------------------------------------------

std::vector<ScalingPoint> run_scaling(const ExperimentConfig& cfg, const std::string& out_dir) {
  reject_unknown_keys(cfg.experiment,
                      {"kind", "fractions", "augment_factors", "augment_base_count", "seed"},
                      "scaling experiment");
  std::vector<double> fractions{0.02, 0.05, 0.1, 0.3, 1.0};
  if (cfg.experiment.contains("fractions")) {
    fractions = cfg.experiment.at("fractions").get<std::vector<double>>();
  }
  std::vector<int> factors{1, 4, 10, 20};
  if (cfg.experiment.contains("augment_factors")) {
    factors = cfg.experiment.at("augment_factors").get<std::vector<int>>();
  }
  int base_count = 50;
  if (cfg.experiment.contains("augment_base_count")) {
    base_count = cfg.experiment.at("augment_base_count").get<int>();
  }
  std::uint64_t seed = 1;
  if (cfg.experiment.contains("seed")) seed = cfg.experiment.at("seed").get<std::uint64_t>();
  ensure_dir(out_dir);

  // one bundle covering both axes: plentiful seg-toy plus the small pose base
  DatasetConfig dcfg = cfg.dataset;
  dcfg.tasks = {{TaskId::seg_toy, 0}, {TaskId::pose_toy, base_count}};
  for (const auto& spec : cfg.dataset.tasks) {
    if (spec.task == TaskId::seg_toy) dcfg.tasks[0].count = spec.count;
  }
  if (dcfg.tasks[0].count <= 0) dcfg.tasks[0].count = 2000;
  const DataBundle bundle = prepare_data(dcfg);
  const std::vector<VisualSentence> val_sentences =
      build_sentences(bundle.val, bundle.codebook, dcfg.context_length, true,
                      derive_seed(dcfg.seed, 0x7A11));

  std::ofstream csv(join_path(out_dir, "scaling.csv"));
  csv << "axis,x,train_tokens,loss,accuracy,perplexity\n";

  std::vector<ScalingPoint> points;
  auto run_point = [&](const std::string& axis, double x, const DatasetManifest& manifest,
                       TaskId eval_task) {
    const std::vector<VisualSentence> train_sentences =
        build_sentences(manifest, bundle.codebook, dcfg.context_length, true,
                        derive_seed(dcfg.seed, 0x5E11));
    ModelConfig mcfg = bind_model(cfg.model, dcfg);
    ModelParameters<float> params = init_params<float>(mcfg, seed);
    OptimizerState state = make_optimizer_state(params);
    TrainConfig tcfg = cfg.train;
    tcfg.seed = derive_seed(seed, static_cast<std::uint64_t>(points.size()) + 101);
    const std::vector<EvalRecord> records =
        run_training(params, state, tcfg, bundle.codebook, train_sentences, val_sentences);
    const EvalRecord& rec = record_for(records, eval_task);
    ScalingPoint point;
    point.axis = axis;
    point.x = x;
    point.train_tokens = manifest.token_count(eval_task);
    point.loss = rec.loss;
    point.accuracy = rec.accuracy;
    point.perplexity = rec.perplexity;
    csv << axis << "," << x << "," << point.train_tokens << "," << point.loss << ","
        << point.accuracy << "," << point.perplexity << "\n";
    csv.flush();
    points.push_back(point);
  };

  const DatasetManifest seg_all = manifest_subset(bundle.train, TaskId::seg_toy);
  for (const double f : fractions) {
    run_point("fraction", f, data_fraction(seg_all, f, derive_seed(seed, 0xF2AC)),
              TaskId::seg_toy);
  }
  const DatasetManifest pose_base = manifest_subset(bundle.train, TaskId::pose_toy);
  for (const int factor : factors) {
    run_point("augment", static_cast<double>(factor),
              extend_by_augmentation(pose_base, factor, derive_seed(seed, 0xA06F)),
              TaskId::pose_toy);
  }

  // loss-vs-x curves for both axes
  std::vector<double> xs_f, ys_f, xs_a, ys_a;
  for (const auto& p : points) {
    if (p.axis == "fraction") {
      xs_f.push_back(p.x);
      ys_f.push_back(p.loss);
    } else {
      xs_a.push_back(p.x);
      ys_a.push_back(p.loss);
    }
  }
  if (!xs_f.empty()) write_line_plot(join_path(out_dir, "scaling_fraction.ppm"), xs_f, {ys_f});
  if (!xs_a.empty()) write_line_plot(join_path(out_dir, "scaling_augment.ppm"), xs_a, {ys_a});
  return points;
}

// --- foreground segmentation --------------------------------------------------------------

std::vector<ForegroundOutcome> run_foreground(const ExperimentConfig& cfg,
                                              const std::string& out_dir) {
  reject_unknown_keys(cfg.experiment,
                      {"kind", "seeds", "examples", "queries", "finetune_samples",
                       "finetune_steps", "finetune_peak_lr", "threshold"},
                      "foreground experiment");
  const std::vector<std::uint64_t> seeds = experiment_seeds(cfg.experiment);
  int n_examples = 3;
  int n_queries = 16;
  int ft_samples = 24;
  std::int64_t ft_steps = 200;
  float threshold = 0.08f;
  if (cfg.experiment.contains("examples")) n_examples = cfg.experiment.at("examples").get<int>();
  if (cfg.experiment.contains("queries")) n_queries = cfg.experiment.at("queries").get<int>();
  if (cfg.experiment.contains("finetune_samples")) {
    ft_samples = cfg.experiment.at("finetune_samples").get<int>();
  }
  if (cfg.experiment.contains("finetune_steps")) {
    ft_steps = cfg.experiment.at("finetune_steps").get<std::int64_t>();
  }
  if (cfg.experiment.contains("threshold")) {
    threshold = cfg.experiment.at("threshold").get<float>();
  }
  double ft_peak = cfg.train.peak_lr * 0.3;
  if (cfg.experiment.contains("finetune_peak_lr")) {
    ft_peak = cfg.experiment.at("finetune_peak_lr").get<double>();
  }
  ensure_dir(out_dir);

  DatasetConfig dcfg = cfg.dataset;
  dcfg.tasks = {{TaskId::seg_toy, 0}};
  for (const auto& spec : cfg.dataset.tasks) {
    if (spec.task == TaskId::seg_toy) dcfg.tasks[0].count = spec.count;
  }
  if (dcfg.tasks[0].count <= 0) dcfg.tasks[0].count = 600;
  dcfg.val_count = std::max(dcfg.val_count, n_queries);
  // prompting needs (2*examples + 2) images in context
  const int needed = (2 * n_examples + 2) * dcfg.tokens_per_image();
  if (dcfg.context_length < needed) dcfg.context_length = needed;

  const DataBundle bundle = prepare_data(dcfg);
  const std::vector<VisualSentence> train_sentences =
      build_sentences(bundle.train, bundle.codebook, dcfg.context_length, true,
                      derive_seed(dcfg.seed, 0x5E11));
  const std::vector<VisualSentence> val_sentences =
      build_sentences(bundle.val, bundle.codebook, dcfg.context_length, true,
                      derive_seed(dcfg.seed, 0x7A11));

  // fixed example pairs and queries shared by every seed
  std::vector<SamplePair> examples;
  for (int i = 0; i < n_examples; ++i) {
    examples.push_back(materialize(bundle.train.entries[static_cast<std::size_t>(i)],
                                   dcfg.image_size));
  }
  std::vector<SamplePair> queries;
  const DatasetManifest seg_val = manifest_subset(bundle.val, TaskId::seg_toy);
  for (int i = 0; i < n_queries && i < static_cast<int>(seg_val.entries.size()); ++i) {
    queries.push_back(materialize(seg_val.entries[static_cast<std::size_t>(i)], dcfg.image_size));
  }

  // tokenizer ceiling: ground truth through encode/decode and the same
  // post-processing, against the raw ground-truth mask
  double ceiling = 0.0;
  {
    std::vector<double> ious;
    for (const auto& q : queries) {
      const Image round_trip = decode(encode(q.annotation, bundle.codebook), bundle.codebook);
      ious.push_back(miou(postprocess_binary(round_trip, threshold),
                          postprocess_binary(q.annotation, threshold)));
    }
    ceiling = mean_miou(ious);
  }

  std::ofstream csv(join_path(out_dir, "foreground.csv"));
  csv << "seed,variant,query,iou\n";
  auto emit = [&](std::uint64_t seed, const std::string& variant, const std::vector<double>& ious) {
    for (std::size_t i = 0; i < ious.size(); ++i) {
      csv << seed << "," << variant << "," << i << "," << ious[i] << "\n";
    }
    csv << seed << "," << variant << ",mean," << mean_miou(ious) << "\n";
    csv.flush();
  };

  std::vector<ForegroundOutcome> outcomes;
  for (const std::uint64_t seed : seeds) {
    ForegroundOutcome outcome;
    outcome.seed = seed;
    outcome.ceiling_miou = ceiling;

    ModelConfig mcfg = bind_model(cfg.model, dcfg);
    ModelParameters<float> params = init_params<float>(mcfg, seed);
    OptimizerState state = make_optimizer_state(params);
    TrainConfig tcfg = cfg.train;
    tcfg.seed = seed;
    run_training(params, state, tcfg, bundle.codebook, train_sentences, val_sentences);

    auto score = [&](std::vector<double>& ious, const std::string& tag) {
      ious.clear();
      for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        Prompt prompt;
        prompt.examples = examples;
        prompt.query = queries[qi].input;
        const Image out = prompted_inference(params, bundle.codebook, prompt);
        ious.push_back(miou(postprocess_binary(out, threshold),
                            postprocess_binary(queries[qi].annotation, threshold)));
        if (qi < 2) {
          write_ppm(join_path(out_dir, tag + "_s" + std::to_string(seed) + "_q" +
                                           std::to_string(qi) + ".ppm"),
                    contact_sheet({queries[qi].input, queries[qi].annotation, out}));
        }
      }
    };

    score(outcome.base_ious, "base");
    outcome.base_miou = mean_miou(outcome.base_ious);
    emit(seed, "base", outcome.base_ious);

    // dagger protocol: a small fresh black-background set resampled x100,
    // then a short fine-tuning pass
    DatasetManifest ft = make_manifest({{TaskId::seg_toy, ft_samples}},
                                       derive_seed(dcfg.seed, 0xF17E + seed), dcfg.image_size,
                                       dcfg.tokens_per_image());
    ft = repeat_entries(ft, 100);
    const std::vector<VisualSentence> ft_sentences =
        build_sentences(ft, bundle.codebook, dcfg.context_length, true,
                        derive_seed(dcfg.seed, 0xF17E));
    TrainConfig ft_cfg = cfg.train;
    ft_cfg.total_steps = ft_steps;
    ft_cfg.peak_lr = ft_peak;
    ft_cfg.final_lr = std::min(cfg.train.final_lr, ft_peak * 0.1);
    ft_cfg.seed = derive_seed(seed, 0xF17E);
    OptimizerState ft_state = make_optimizer_state(params);
    run_training(params, ft_state, ft_cfg, bundle.codebook, ft_sentences, val_sentences);

    score(outcome.finetuned_ious, "finetuned");
    outcome.finetuned_miou = mean_miou(outcome.finetuned_ious);
    emit(seed, "finetuned", outcome.finetuned_ious);

    csv << seed << ",ceiling,mean," << ceiling << "\n";
    csv.flush();
    outcomes.push_back(std::move(outcome));
  }
  return outcomes;
}

}  // namespace lvm
