#include "tumorseg/checkpoint.hpp"
#include "tumorseg/dataset.hpp"
#include "tumorseg/reporting.hpp"
#include "tumorseg/samples.hpp"
#include "tumorseg/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace tumorseg;

namespace {

constexpr int kOk = 0;
constexpr int kIo = 1;
constexpr int kUsage = 2;
constexpr int kNumeric = 3;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kIoFailure:
      return kIo;
    case ErrorCode::kDivergedLoss:
    case ErrorCode::kNonFiniteGradient:
      return kNumeric;
    default:
      return kUsage;
  }
}

struct ConvertArgs {
  fs::path input;
  fs::path output;
  std::string splits;
  std::uint64_t seed = 42;
  int bit_depth = 8;
  std::string normalization = "per_image";
};

struct TrainArgs {
  fs::path dataset;
  fs::path out;
  std::string arch;
  std::string backbone = "none";
  std::string size = "64x64";
  std::optional<int> depth;
  std::optional<Index> base_width;
  std::optional<int> recurrence_steps;
  std::optional<bool> batch_norm;
  std::string gate_source = "decoder";
  TrainConfig train;
};

struct EvaluateArgs {
  fs::path dataset;
  fs::path checkpoint;
  fs::path out;
  std::string split = "test";
  double threshold = 0.5;
  std::string aggregation = "micro";
};

struct ReportArgs {
  std::vector<fs::path> reports;
  std::vector<fs::path> models;
  fs::path dataset;
  fs::path out;
  std::size_t qualitative = 0;
  std::string split = "test";
  std::uint64_t seed = 0;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text) || !os.flush()) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::kIoFailure, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, path.string() + ": " + e.what());
  }
}

SplitCounts parse_splits(const std::string& s) {
  std::vector<std::int64_t> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    std::int64_t v = -1;
    try {
      v = std::stoll(item, &used);
    } catch (const std::exception&) {
    }
    if (used != item.size() || v < 0) throw Error(ErrorCode::kInvalidConfig, "bad split count '" + item + "'");
    parts.push_back(v);
  }
  if (parts.size() != 3) throw Error(ErrorCode::kInvalidConfig, "--splits takes train,val,test");
  return SplitCounts{parts[0], parts[1], parts[2]};
}

std::pair<Index, Index> parse_size(const std::string& s) {
  Index h = 0, w = 0;
  char x = 0;
  std::istringstream is(s);
  if (!(is >> h >> x >> w) || x != 'x' || !is.eof() || h < 1 || w < 1) {
    throw Error(ErrorCode::kInvalidConfig, "size must look like 64x64, got '" + s + "'");
  }
  return {h, w};
}

void require_dir(const fs::path& p, const char* what) {
  if (p.empty()) throw Error(ErrorCode::kInvalidConfig, std::string(what) + " is required");
  if (!fs::is_directory(p)) throw Error(ErrorCode::kInvalidConfig, std::string(what) + " " + p.string() + " not found");
}

int run_convert(const ConvertArgs& a) {
  ConvertOptions opts;
  if (!a.splits.empty()) opts.counts = parse_splits(a.splits);
  opts.seed = a.seed;
  opts.export_options.bit_depth = a.bit_depth;
  opts.export_options.normalization =
      a.normalization == "global" ? Normalization::kGlobal : Normalization::kPerImage;
  require_dir(a.input, "--input");
  const ConvertSummary s = convert_directory(a.input, a.output, opts);
  std::cout << "records " << s.manifest.entries.size() << '\n';
  for (int label = 1; label <= 3; ++label) {
    std::cout << "  " << label_name(label) << ' ' << s.class_counts[label - 1] << '\n';
  }
  const SplitCounts& c = s.manifest.counts;
  std::cout << "splits train " << c.train << " val " << c.val << " test " << c.test << " (seed " << s.manifest.seed
            << ")\n";
  return kOk;
}

int run_train(const TrainArgs& a) {
  require_dir(a.dataset, "--dataset");
  ArchConfig arch;
  arch.family = parse_family(a.arch);
  arch.backbone = parse_backbone(a.backbone);
  std::tie(arch.input_h, arch.input_w) = parse_size(a.size);
  if (a.depth) arch.depth = *a.depth;
  if (a.base_width) arch.base_width = *a.base_width;
  if (a.recurrence_steps) arch.recurrence_steps = *a.recurrence_steps;
  arch.batch_norm = a.batch_norm;
  arch.gate_source = parse_gate_source(a.gate_source);
  arch.seed = a.train.seed;
  arch.validate();
  a.train.validate();

  const SplitManifest manifest = read_manifest(a.dataset);
  const SampleSet train = load_split(a.dataset, manifest, "train", arch.input_h, arch.input_w);
  const SampleSet val = load_split(a.dataset, manifest, "val", arch.input_h, arch.input_w);

  fs::create_directories(a.out);
  const nlohmann::json resolved = {{"subcommand", "train"},
                                   {"dataset", fs::absolute(a.dataset).string()},
                                   {"arch", arch},
                                   {"train", a.train},
                                   {"train_samples", train.size()},
                                   {"val_samples", val.size()}};
  write_text(a.out / "resolved_config.json", resolved.dump(2) + "\n");

  ModelHandle<float> model = build_model<float>(arch);
  std::cout << display_name(arch) << ", " << param_count(model) << " parameters\n";
  TrainHooks hooks;
  hooks.run_dir = a.out;
  hooks.on_epoch = [&](const EpochRecord& r, ModelHandle<float>&) {
    std::cout << "epoch " << r.epoch << '/' << a.train.epochs << std::fixed << std::setprecision(4) << "  loss "
              << r.train_loss << "  val_loss " << r.val_loss << "  val_miou " << r.val_miou << std::defaultfloat
              << "  " << std::setprecision(3) << r.seconds << "s" << std::endl;
    return true;
  };
  const RunHistory h = train_run(model, train, val, a.train, hooks);
  std::cout << "best epoch " << h.best_epoch << ", val_miou " << h.epochs[static_cast<std::size_t>(h.best_epoch - 1)].val_miou
            << '\n';
  return kOk;
}

int run_evaluate(const EvaluateArgs& a) {
  require_dir(a.dataset, "--dataset");
  if (!fs::is_regular_file(a.checkpoint)) {
    throw Error(ErrorCode::kInvalidConfig, "checkpoint " + a.checkpoint.string() + " not found");
  }
  check_threshold(a.threshold);
  ModelHandle<float> model = load_model<float>(a.checkpoint);
  const ArchConfig& arch = model.config();
  const SampleSet samples = load_split(a.dataset, a.split, arch.input_h, arch.input_w);
  const MetricReport r = evaluate_split(model, samples, a.threshold, parse_aggregation(a.aggregation));
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  write_text(a.out, nlohmann::json(r).dump(2) + "\n");
  std::cout << r.model << " on " << r.split << " (" << samples.size() << " images, threshold " << r.threshold
            << "): " << std::fixed << std::setprecision(4) << "precision " << r.values.precision << " recall "
            << r.values.recall << " f1 " << r.values.f1 << " mean_iou " << r.values.mean_iou << '\n';
  return kOk;
}

int run_report(const ReportArgs& a) {
  if (a.reports.empty()) throw Error(ErrorCode::kEmptySet, "no report files given");
  ComparisonSet set;
  for (const auto& p : a.reports) set.reports.push_back(read_json(p).get<MetricReport>());
  set.validate();
  if (a.qualitative > 0 && a.models.empty()) {
    throw Error(ErrorCode::kMissingPrediction, "--qualitative needs --models");
  }

  fs::create_directories(a.out);
  const std::string text = metrics_table(set, TableFormat::kText);
  write_text(a.out / "table.txt", text);
  write_text(a.out / "table.md", metrics_table(set, TableFormat::kMarkdown));
  write_text(a.out / "table.csv", metrics_table(set, TableFormat::kCsv));
  pr_chart(set, a.out / "pr_chart.png");
  std::cout << text;

  if (a.qualitative > 0) {
    require_dir(a.dataset, "--dataset");
    std::vector<ModelHandle<float>> models;
    for (const auto& p : a.models) models.push_back(load_model<float>(p));
    const ArchConfig& first = models.front().config();
    for (const auto& m : models) {
      if (m.config().input_h != first.input_h || m.config().input_w != first.input_w) {
        throw Error(ErrorCode::kInvalidConfig, "models for the grid must share one input size");
      }
    }
    const SplitManifest manifest = read_manifest(a.dataset);
    const auto stems = pick_samples(manifest.stems(a.split), a.qualitative, a.seed);
    if (stems.size() < a.qualitative) {
      throw Error(ErrorCode::kEmptySplit, "split '" + a.split + "' has only " + std::to_string(stems.size()) +
                                              " images");
    }
    SampleSet samples = load_stems(a.dataset, stems, first.input_h, first.input_w);
    samples.split = a.split;
    std::vector<TensorF> predictions;
    for (auto& m : models) predictions.push_back(m.predict(samples.images));
    const GrayImage grid = qualitative_grid(samples, predictions, set.reports.front().threshold);
    write_png(a.out / "grid.png", grid);
    std::cout << "grid " << samples.size() << "x" << 2 + models.size() << " written\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain-tumor MRI segmentation toolkit"};
  app.require_subcommand(1);

  ConvertArgs conv;
  auto* convert = app.add_subcommand("convert", "Export .mat records to PNG images, masks and a split manifest");
  convert->add_option("--input", conv.input, "Directory of .mat records")->required();
  convert->add_option("--output", conv.output, "Dataset directory to create")->required();
  convert->add_option("--splits", conv.splits, "train,val,test counts (default: proportional)");
  convert->add_option("--seed", conv.seed, "Split shuffle seed")->capture_default_str();
  convert->add_option("--bit-depth", conv.bit_depth, "PNG bit depth")
      ->check(CLI::IsMember({8, 16}))
      ->capture_default_str();
  convert->add_option("--normalization", conv.normalization, "Intensity scaling")
      ->check(CLI::IsMember({"per_image", "global"}))
      ->capture_default_str();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train one architecture from scratch");
  train->add_option("--dataset", tr.dataset, "Converted dataset directory")->envname("TUMORSEG_DATA_ROOT");
  train->add_option("--arch", tr.arch, "unet, attention_unet, resunet, resunetpp or r2unet")->required();
  train->add_option("--backbone", tr.backbone, "none, vgg19, resnet152 or densenet201")->capture_default_str();
  train->add_option("--size", tr.size, "Input size HxW")->capture_default_str();
  train->add_option("--depth", tr.depth, "Encoder depth");
  train->add_option("--base-width", tr.base_width, "Channels at the first level");
  train->add_option("--t", tr.recurrence_steps, "Recurrence steps (r2unet)");
  train->add_option("--batch-norm", tr.batch_norm, "Force batch norm on or off");
  train->add_option("--gate-source", tr.gate_source, "Attention gating signal: decoder or encoder")
      ->capture_default_str();
  train->add_option("--epochs", tr.train.epochs)->capture_default_str();
  train->add_option("--batch-size", tr.train.batch_size)->capture_default_str();
  train->add_option("--lr", tr.train.learning_rate)->capture_default_str();
  train->add_option("--beta1", tr.train.beta1)->capture_default_str();
  train->add_option("--beta2", tr.train.beta2)->capture_default_str();
  train->add_option("--epsilon", tr.train.epsilon)->capture_default_str();
  train->add_option("--seed", tr.train.seed)->capture_default_str();
  train->add_option("--threshold", tr.train.threshold)->capture_default_str();
  train->add_option("--checkpoint-metric", tr.train.checkpoint_metric)
      ->check(CLI::IsMember({"val_miou", "val_loss"}))
      ->capture_default_str();
  train->add_option("--out", tr.out, "Run directory")->required();

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on one split");
  evaluate->add_option("--dataset", ev.dataset)->envname("TUMORSEG_DATA_ROOT");
  evaluate->add_option("--checkpoint", ev.checkpoint)->required();
  evaluate->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  evaluate->add_option("--threshold", ev.threshold)->capture_default_str();
  evaluate->add_option("--aggregation", ev.aggregation)
      ->check(CLI::IsMember({"micro", "macro"}))
      ->capture_default_str();
  evaluate->add_option("--out", ev.out, "Report JSON path")->required();

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Compare evaluation reports");
  report->add_option("--reports", rep.reports, "Report JSON files");
  report->add_option("--qualitative", rep.qualitative, "Rows of the qualitative grid")->capture_default_str();
  report->add_option("--models", rep.models, "Checkpoints for the qualitative grid");
  report->add_option("--dataset", rep.dataset)->envname("TUMORSEG_DATA_ROOT");
  report->add_option("--split", rep.split)->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  report->add_option("--seed", rep.seed, "Sample choice seed")->capture_default_str();
  report->add_option("--out", rep.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*convert) return run_convert(conv);
    if (*train) return run_train(tr);
    if (*evaluate) return run_evaluate(ev);
    return run_report(rep);
  } catch (const DivergedLoss& e) {
    std::cerr << "error: " << e.what() << " after " << e.history().epochs.size() << " epochs\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  }
}
