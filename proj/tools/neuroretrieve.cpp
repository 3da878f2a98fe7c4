#include <charconv>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "neuroretrieve/neuroretrieve.hpp"

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kIo = 3, kNumeric = 4 };

struct Options {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string pooling;
  std::string ratios;
  bool noise = false;
  std::string baseline;
  std::string out;
  std::string out2;
  std::vector<std::string> inputs;
};

std::vector<double> parse_ratios(const std::string& csv) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= csv.size()) {
    auto end = csv.find(',', start);
    if (end == std::string::npos) end = csv.size();
    const auto cell = csv.substr(start, end - start);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size()) {
      throw nr::ConfigError("--ratios: '" + cell + "' is not a number");
    }
    out.push_back(v);
    start = end + 1;
  }
  return out;
}

nr::RunConfig resolve_config(const Options& o) {
  nr::RunConfig cfg = o.config.empty() ? nr::preset_config(o.preset) : nr::load_config(o.config);
  if (!o.config.empty() && !o.preset.empty()) throw nr::ConfigError("use either --config or --preset, not both");
  if (o.seed) cfg.seed = *o.seed;
  if (!o.pooling.empty()) cfg.encoder.pooling = nr::parse_pooling(o.pooling);
  if (!o.ratios.empty()) cfg.eval.ratios = parse_ratios(o.ratios);
  if (o.noise) cfg.eval.noise = true;
  if (!o.baseline.empty()) cfg.eval.baseline = o.baseline;
  nr::validate(cfg);
  return cfg;
}

int run(const std::string& command, const Options& o) {
  if (command == "compare") {
    nr::cmd_compare(o.inputs.at(0), o.inputs.at(1), o.out, std::cout);
    return kOk;
  }
  const auto cfg = resolve_config(o);
  if (command == "gen-data") {
    std::vector<std::string> outs{o.out};
    if (!o.out2.empty()) outs.push_back(o.out2);
    nr::cmd_gen_data(cfg, outs, std::cout);
  } else if (command == "train") {
    nr::cmd_train(cfg, o.inputs, o.out, std::cout);
  } else if (command == "eval") {
    std::vector<std::string> corpora(o.inputs.begin() + 1, o.inputs.end());
    nr::cmd_eval(cfg, o.inputs.at(0), corpora, o.out, std::cout);
  } else if (command == "reproduce-shape") {
    nr::cmd_reproduce_shape(cfg, o.out, std::cout);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Brain passage retrieval: ICT pairs, signal encoder training, masking-sweep evaluation"};
  app.set_version_flag("--version", nr::kToolVersion);
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--preset", o.preset, "Named preset: table1-visual, table1-auditory, table1-pair, reproduce-shape");
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { o.seed = v; }, "Run seed");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic paired corpora and print corpus statistics");
  common(gen);
  gen->add_option("--out", o.out, "Corpus path for the first generator")->required();
  gen->add_option("--out2", o.out2, "Corpus path for the second generator");

  auto* train = app.add_subcommand("train", "Train a signal encoder on one (individual) or two (combined) corpora");
  common(train);
  train->add_option("--pooling", o.pooling, "Pooling strategy")->check(CLI::IsMember({"cls", "mean", "max", "multi"}));
  train->add_option("--out", o.out, "Checkpoint path")->required();
  train->add_option("corpora", o.inputs, "Corpus files")->required()->expected(1, 2);

  auto* eval = app.add_subcommand("eval", "Masking sweep of a checkpoint on the test split");
  common(eval);
  eval->add_option("--ratios", o.ratios, "Comma-separated masking ratios");
  eval->add_flag("--noise", o.noise, "Add the random-noise control");
  eval->add_option("--baseline", o.baseline, "Text baseline")->check(CLI::IsMember({"bm25"}));
  eval->add_option("--out", o.out, "Report path (.json); CSVs are written next to it")->required();
  eval->add_option("inputs", o.inputs, "Checkpoint followed by one or two corpora")->required()->expected(2, 3);

  auto* compare = app.add_subcommand("compare", "Paired t-test per metric across masking levels");
  compare->add_option("reports", o.inputs, "Two sweep reports (.json or .csv)")->required()->expected(2);
  compare->add_option("--out", o.out, "Write the significance table as CSV");

  auto* repro = app.add_subcommand("reproduce-shape", "Run the full individual/combined design on synthetic data");
  common(repro);
  repro->add_option("--out", o.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  std::string command = app.get_subcommands().front()->get_name();
  if (command == "reproduce-shape" && o.config.empty() && o.preset.empty()) o.preset = "reproduce-shape";
  try {
    return run(command, o);
  } catch (const nr::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const nr::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const nr::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const nr::Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
}
