// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// ucad: command-line driver for backbone creation, expert training,
// inference, request flows, DEAR, expert inspection and synthetic data.
//
// Exit codes: 0 success, 2 usage or validation, 3 conflict, 4 I/O or codec,
// 5 numeric failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "ucad/ucad.hpp"

namespace fs = std::filesystem;

namespace ucad::cli {
namespace {

enum ExitCode : int { kOk = 0, kUsage = 2, kConflictExit = 3, kIoExit = 4, kNumericExit = 5 };

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConflict: return kConflictExit;
    case ErrorKind::kIo:
    case ErrorKind::kCodec: return kIoExit;
    case ErrorKind::kNumeric: return kNumericExit;
    default: return kUsage;
  }
}

struct GlobalFlags {
  std::string backbone;
  std::string registry;
  std::uint64_t seed = 0;
  std::string precision = "single";
  std::size_t threads = 1;
};

std::string default_registry() {
  const char* home = std::getenv("UNICAD_HOME");
  return home && *home ? home : "experts";
}

std::string hex(std::uint32_t v) { return fmt::format("0x{:08x}", v); }

void require_file(const std::string& path, const std::string& flag) {
  require(!path.empty(), ErrorKind::kInput, flag + " is required");
  require(fs::is_regular_file(path), ErrorKind::kIo, flag + " '" + path + "' does not exist");
}

Backbone<float> load_backbone_flag(const GlobalFlags& g) {
  require_file(g.backbone, "--backbone");
  return load_backbone(g.backbone);
}

// ---------------------------------------------------------------- init-backbone

struct InitArgs {
  std::size_t dim = 768, blocks = 12, heads = 12, mlp = 3072;
  std::size_t patch2d = 16, patch3d = 16, channels2d = 3, channels3d = 1;
  std::vector<std::size_t> max2d{224, 224};
  std::vector<std::size_t> max3d{64, 64, 64};
  std::string out;
};

int cmd_init_backbone(const GlobalFlags& g, const InitArgs& a) {
  BackboneConfig c;
  c.dim = a.dim;
  c.num_blocks = a.blocks;
  c.num_heads = a.heads;
  c.mlp_dim = a.mlp;
  c.embedding.spec2d = {a.patch2d, a.patch2d, a.channels2d, a.max2d[0], a.max2d[1]};
  c.embedding.spec3d = {a.patch3d, a.patch3d, a.patch3d, a.channels3d, a.max3d[0], a.max3d[1], a.max3d[2]};
  c.validate();
  const auto bb = init_random_backbone<float>(c, g.seed);
  save_backbone(bb, a.out);
  fmt::print("backbone: d={} L={} heads={} mlp={}\n", c.dim, c.num_blocks, c.num_heads, c.mlp_dim);
  fmt::print("params: {}\n", bb.param_count());
  fmt::print("fingerprint: {}\n", hex(backbone_fingerprint(bb)));
  fmt::print("wrote {}\n", a.out);
  return kOk;
}

// ------------------------------------------------------------------------ train

struct TrainArgs {
  std::string manifest, task_id, out;
  std::size_t rank = 4, epochs = 100, batch_size = 32;
  double lr = 3e-4;
  bool train_3d_embedding = false;
};

template <Scalar T>
Expert<float> run_training(const Dataset<float>& ds, const Backbone<float>& bb, const TrainConfig& tc,
                           const std::string& task_id) {
  fmt::print("{:>5}  {:>10}  {:>12}  {:>10}  {:>10}\n", "epoch", "train_loss", "train_metric", "val_loss",
             "val_metric");
  auto print_row = [](const EpochMetrics& m) {
    fmt::print("{:>5}  {:>10.4f}  {:>12.4f}  {:>10.4f}  {:>10.4f}\n", m.epoch, m.train_loss, m.train_metric,
               m.val_loss, m.val_metric);
    std::fflush(stdout);
  };
  if constexpr (std::is_same_v<T, float>) {
    auto r = train_expert(ds, bb, tc, task_id, print_row);
    fmt::print("best epoch {} with val metric {:.4f}\n", r.best_epoch, r.best_val_metric);
    return std::move(r.expert);
  } else {
    auto r = train_expert(cast_dataset<T>(ds), bb.template cast<T>(), tc, task_id, print_row);
    fmt::print("best epoch {} with val metric {:.4f}\n", r.best_epoch, r.best_val_metric);
    return r.expert.template cast<float>();
  }
}

int cmd_train(const GlobalFlags& g, const TrainArgs& a) {
  require_file(a.manifest, "--manifest");
  require(!a.task_id.empty(), ErrorKind::kInput, "--task-id is required");
  const auto bb = load_backbone_flag(g);
  const fs::path out = a.out.empty() ? fs::path(g.registry) / (a.task_id + ".ucex") : fs::path(a.out);
  // Duplicates inside the registry and an already registered id both conflict.
  const auto reg = load_registry_dir(g.registry, bb);
  require(!reg.contains(a.task_id), ErrorKind::kConflict,
          "task id '" + a.task_id + "' already exists in " + g.registry);
  require(!fs::exists(out), ErrorKind::kConflict, "output " + out.string() + " already exists");

  TrainConfig tc;
  tc.rank = a.rank;
  tc.epochs = a.epochs;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.lr;
  tc.seed = g.seed;
  tc.train_3d_embedding = a.train_3d_embedding;
  const auto ds = load_dataset(a.manifest);
  tc.loss_mode = ds.multi_label ? LossMode::kBinaryCrossEntropy : LossMode::kCrossEntropy;
  tc.validate();

  const Expert<float> e = g.precision == "double" ? run_training<double>(ds, bb, tc, a.task_id)
                                                  : run_training<float>(ds, bb, tc, a.task_id);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_expert(e, out);
  const auto c = count_trainable_ratio(e, bb);
  fmt::print("lora params {} / backbone params {} = {:.4f}%\n", c.lora_params, c.backbone_params,
             100.0 * c.ratio);
  fmt::print("wrote {}\n", out.string());
  return kOk;
}

// ------------------------------------------------------------------ infer, flow

template <Scalar T>
Registry<T> registry_as(const Registry<float>& reg, const Backbone<float>& bb) {
  Registry<T> out(bb);
  for (const auto& [id, e] : reg.experts()) out.add(e.template cast<T>());
  return out;
}

std::string join_scores(const std::vector<double>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += fmt::format("{}{:.6g}", i ? ";" : "", s[i]);
  return out;
}

struct InferArgs {
  std::string input, task_id;
};

template <Scalar T>
int run_infer(const GlobalFlags& g, const InferArgs& a, const Backbone<float>& bbf, const Registry<float>& regf) {
  const auto bb = bbf.template cast<T>();
  const auto reg = registry_as<T>(regf, bbf);
  const std::vector<TaskRequest<T>> reqs{{"0", a.task_id, load_uten(a.input).template cast<T>()}};
  EngineOptions opts;
  opts.threads = g.threads;
  const auto flow = run_flow(reqs, FlowMode::kRandomFlow, 1, reg, bb, opts);
  if (!flow.errors.empty()) {
    std::fprintf(stderr, "ucad: %s\n", flow.errors[0].message.c_str());
    return exit_code_for(flow.errors[0].kind);
  }
  const auto& p = flow.predictions.at(0);
  const auto& e = reg.lookup(a.task_id);
  fmt::print("task: {}\n", a.task_id);
  for (std::size_t k = 0; k < p.scores.size(); ++k)
    fmt::print("  {:<24} {:.6f}\n", e.class_names[k], p.scores[k]);
  std::string labels;
  for (auto l : p.labels) labels += (labels.empty() ? "" : ",") + e.class_names[l];
  fmt::print("predicted: {}\n", labels.empty() ? "(none)" : labels);
  return kOk;
}

int cmd_infer(const GlobalFlags& g, const InferArgs& a) {
  require_file(a.input, "--input");
  require(!a.task_id.empty(), ErrorKind::kInput, "--task-id is required");
  const auto bb = load_backbone_flag(g);
  const auto reg = load_registry_dir(g.registry, bb);
  return g.precision == "double" ? run_infer<double>(g, a, bb, reg) : run_infer<float>(g, a, bb, reg);
}

struct FlowArgs {
  std::string requests, mode = "random", out;
  std::size_t batch_size = 32;
  bool stats = false;
};

struct RequestLine {
  std::string id, task, path;
};

std::vector<RequestLine> read_requests(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  std::vector<RequestLine> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line == "request_id,task_id,input_path") continue;
    const auto f = split_fields(line, ',');
    require(f.size() == 3, ErrorKind::kInput,
            path.string() + ":" + std::to_string(line_no) + ": expected request_id,task_id,input_path");
    fs::path p = trim(f[2]);
    if (p.is_relative()) p = path.parent_path() / p;
    out.push_back({trim(f[0]), trim(f[1]), p.string()});
  }
  return out;
}

template <Scalar T>
int run_flow_cmd(const GlobalFlags& g, const FlowArgs& a, const Backbone<float>& bbf, const Registry<float>& regf) {
  const auto bb = bbf.template cast<T>();
  const auto reg = registry_as<T>(regf, bbf);
  const auto lines = read_requests(a.requests);
  // Unreadable inputs become per-request errors, like unknown task ids.
  std::vector<TaskRequest<T>> reqs;
  std::map<std::string, std::string> load_errors;
  for (const auto& l : lines) {
    try {
      reqs.push_back({l.id, l.task, load_uten(l.path).template cast<T>()});
    } catch (const Error& e) {
      load_errors[l.id] = e.what();
    }
  }
  EngineOptions opts;
  opts.threads = g.threads;
  const auto mode = a.mode == "ordered" ? FlowMode::kTaskOrdered : FlowMode::kRandomFlow;
  const auto flow = run_flow(reqs, mode, a.batch_size, reg, bb, opts);

  std::map<std::string, const Prediction*> preds;
  std::map<std::string, std::string> errors = load_errors;
  for (const auto& p : flow.predictions) preds[p.request_id] = &p;
  for (const auto& e : flow.errors) errors[e.request_id] = e.message;
  std::ofstream out;
  if (!a.out.empty()) {
    out.open(a.out);
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + a.out);
  }
  auto emit = [&](const std::string& row) {
    if (out.is_open()) out << row << '\n';
    else std::fputs((row + "\n").c_str(), stdout);
  };
  emit("request_id,task_id,top_label,scores,error");
  for (const auto& l : lines) {
    if (auto it = preds.find(l.id); it != preds.end()) {
      const auto& p = *it->second;
      emit(fmt::format("{},{},{},{},", l.id, l.task, argmax(std::span<const double>(p.scores)),
                       join_scores(p.scores)));
    } else {
      std::string msg = errors.count(l.id) ? errors[l.id] : "not processed";
      for (auto& ch : msg)
        if (ch == ',' || ch == '\n') ch = ' ';
      emit(fmt::format("{},{},,,{}", l.id, l.task, msg));
    }
  }
  if (a.stats) {
    const auto& s = flow.stats;
    fmt::print("requests: {}\n", lines.size());
    fmt::print("micro_batches: {}\n", s.micro_batch_count);
    fmt::print("errors: {}\n", s.error_count + load_errors.size());
    fmt::print("resident_param_bytes: {}\n", lines.empty() ? 0 : s.resident_param_bytes);
    fmt::print("per_task_model_bytes: {}\n", s.per_task_model_bytes);
    fmt::print("wall_time_ms: {:.3f}\n", lines.empty() ? 0.0 : s.wall_time_ms);
  }
  return kOk;
}

int cmd_flow(const GlobalFlags& g, const FlowArgs& a) {
  require_file(a.requests, "--requests");
  require(a.batch_size > 0, ErrorKind::kInput, "--batch-size must be positive");
  const auto bb = load_backbone_flag(g);
  const auto reg = load_registry_dir(g.registry, bb);
  return g.precision == "double" ? run_flow_cmd<double>(g, a, bb, reg) : run_flow_cmd<float>(g, a, bb, reg);
}

// ------------------------------------------------------------------------- dear

struct DearArgs {
  std::vector<std::string> csv;
  double mem_baseline = 0.92;
  double k = 3.0;
};

int cmd_dear(const DearArgs& a) {
  for (const auto& f : a.csv) require_file(f, "--csv");
  for (const auto& f : a.csv) {
    const auto in = read_dear_csv(f, a.mem_baseline, a.k);
    fmt::print("{}: {:.3f}\n", fs::path(f).stem().string(), dear(in));
  }
  return kOk;
}

// --------------------------------------------------------------- expert inspect

int cmd_expert_inspect(const GlobalFlags& g, const std::string& path) {
  require_file(path, "expert path");
  const auto e = load_expert(path);
  fmt::print("task_id: {}\n", e.task_id);
  fmt::print("modality: {}\n", to_string(e.modality));
  fmt::print("rank: {}\n", e.rank);
  fmt::print("head: {} ({} classes)\n", to_string(e.head_mode), e.num_classes);
  std::string names;
  for (const auto& n : e.class_names) names += (names.empty() ? "" : ", ") + n;
  fmt::print("classes: {}\n", names);
  fmt::print("backbone_fingerprint: {}\n", hex(e.backbone_fingerprint));
  fmt::print("dim: {} blocks: {}\n", e.dim(), e.num_blocks());
  fmt::print("embedding3d override: {}\n", e.embedding3d ? "yes" : "no");
  for_each_trainable(e, [](const std::string& name, const Tensor<float>& t) {
    fmt::print("  {:<24} {}\n", name, shape_string(t.shape()));
  });
  const std::size_t lora = lora_param_count(e.num_blocks(), e.dim(), e.rank);
  fmt::print("lora params: {}\n", lora);
  fmt::print("total params: {}\n", expert_param_count(e));
  if (!g.backbone.empty()) {
    const auto c = count_trainable_ratio(e, load_backbone_flag(g));
    fmt::print("ratio: {:.4f}%\n", 100.0 * c.ratio);
  }
  return kOk;
}

// ---------------------------------------------------------------- synth-dataset

struct SynthArgs {
  std::size_t classes = 2, train = 200, val = 50, test = 0, channels = 1;
  std::string modality = "2d";
  std::vector<std::size_t> size;
  double noise = 0.1;
  std::string out;
};

int cmd_synth_dataset(const GlobalFlags& g, const SynthArgs& a) {
  SynthConfig c;
  c.classes = a.classes;
  c.modality = a.modality == "3d" ? Modality::kThreeD : Modality::kTwoD;
  c.spatial = !a.size.empty() ? Shape(a.size.begin(), a.size.end())
                              : (c.modality == Modality::kTwoD ? Shape{16, 16} : Shape{8, 8, 8});
  c.channels = a.channels;
  c.train = a.train;
  c.val = a.val;
  c.test = a.test;
  c.noise = a.noise;
  c.seed = g.seed;
  const auto ds = make_synthetic_dataset(c);
  write_dataset(ds, a.out);
  fmt::print("wrote {} train, {} val, {} test samples to {}\n", ds.train.size(), ds.val.size(), ds.test.size(),
             a.out);
  return kOk;
}

}  // namespace
}  // namespace ucad::cli

int main(int argc, char** argv) {
  using namespace ucad::cli;
  CLI::App app{"ucad: shared frozen backbone with per-task low-rank experts"};
  app.require_subcommand(1);
  GlobalFlags g;
  g.registry = default_registry();
  app.add_option("--backbone", g.backbone, "Backbone file (.ucbb)");
  app.add_option("--registry", g.registry, "Expert directory (default $UNICAD_HOME or ./experts)");
  app.add_option("--seed", g.seed, "Root seed");
  app.add_option("--precision", g.precision, "Arithmetic precision")->check(CLI::IsMember({"single", "double"}));
  app.add_option("--threads", g.threads, "Worker threads for forward passes")->check(CLI::PositiveNumber);

  InitArgs init;
  auto* c_init = app.add_subcommand("init-backbone", "Write a seeded random backbone");
  c_init->add_option("--dim", init.dim);
  c_init->add_option("--blocks", init.blocks);
  c_init->add_option("--heads", init.heads);
  c_init->add_option("--mlp", init.mlp);
  c_init->add_option("--patch2d", init.patch2d);
  c_init->add_option("--patch3d", init.patch3d);
  c_init->add_option("--channels2d", init.channels2d);
  c_init->add_option("--channels3d", init.channels3d);
  c_init->add_option("--max-2d", init.max2d, "Largest 2D input H W")->expected(2);
  c_init->add_option("--max-3d", init.max3d, "Largest 3D input D H W")->expected(3);
  c_init->add_option("--out", init.out)->required();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train one expert against the frozen backbone");
  c_train->add_option("--manifest", train.manifest)->required();
  c_train->add_option("--task-id", train.task_id)->required();
  c_train->add_option("--rank", train.rank);
  c_train->add_option("--epochs", train.epochs);
  c_train->add_option("--lr", train.lr);
  c_train->add_option("--batch-size", train.batch_size);
  c_train->add_flag("--train-3d-embedding", train.train_3d_embedding);
  c_train->add_option("--out", train.out, "Output .ucex (default <registry>/<task-id>.ucex)");

  InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "Classify one input");
  c_infer->add_option("--input", infer.input)->required();
  c_infer->add_option("--task-id", infer.task_id)->required();

  FlowArgs flow;
  auto* c_flow = app.add_subcommand("flow", "Run a mixed request file through the engine");
  c_flow->add_option("--requests", flow.requests, "Lines of request_id,task_id,input_path")->required();
  c_flow->add_option("--mode", flow.mode)->check(CLI::IsMember({"random", "ordered"}));
  c_flow->add_option("--batch-size", flow.batch_size);
  c_flow->add_option("--out", flow.out, "Prediction CSV (default stdout)");
  c_flow->add_flag("--stats", flow.stats, "Print flow statistics");

  DearArgs dear_args;
  auto* c_dear = app.add_subcommand("dear", "Compute DEAR from task_id,acc_m,acc_baseline,mem_m tables");
  c_dear->add_option("--csv", dear_args.csv)->required();
  c_dear->add_option("--mem-baseline", dear_args.mem_baseline, "Memory of one baseline model");
  c_dear->add_option("--k", dear_args.k);

  std::string inspect_path;
  auto* c_expert = app.add_subcommand("expert", "Expert file utilities");
  c_expert->require_subcommand(1);
  auto* c_inspect = c_expert->add_subcommand("inspect", "Print an expert's header and shapes");
  c_inspect->add_option("path", inspect_path)->required();

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth-dataset", "Write a separable synthetic dataset");
  c_synth->add_option("--classes", synth.classes);
  c_synth->add_option("--modality", synth.modality)->check(CLI::IsMember({"2d", "3d"}));
  c_synth->add_option("--size", synth.size, "Spatial dims");
  c_synth->add_option("--channels", synth.channels);
  c_synth->add_option("--train", synth.train);
  c_synth->add_option("--val", synth.val);
  c_synth->add_option("--test", synth.test);
  c_synth->add_option("--noise", synth.noise);
  c_synth->add_option("--out", synth.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*c_init) return cmd_init_backbone(g, init);
    if (*c_train) return cmd_train(g, train);
    if (*c_infer) return cmd_infer(g, infer);
    if (*c_flow) return cmd_flow(g, flow);
    if (*c_dear) return cmd_dear(dear_args);
    if (*c_inspect) return cmd_expert_inspect(g, inspect_path);
    if (*c_synth) return cmd_synth_dataset(g, synth);
  } catch (const ucad::Error& e) {
    std::fprintf(stderr, "ucad: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ucad: %s\n", e.what());
    return kIoExit;
  }
  return kUsage;
}
