// twinsys command-line tool: train a network, twin it with a weighted k-NN
// case base, explain queries by precedent, compute feature-activation maps,
// and compare weighting schemes by twin fidelity.
//
// Exit codes: 0 success, 1 runtime/domain error, 2 usage error.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "twinsys/twinsys.hpp"

namespace {

using namespace twinsys;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kSchemeList =
    "sensitivity, activity, relevance, saliency, surrogate, contribution, uniform";

Scheme parse_scheme(const std::string& name) {
  try {
    return scheme_from(name);
  } catch (const Error&) {
    throw UsageError("unknown scheme '" + name + "' (valid: " + std::string(kSchemeList) + ")");
  }
}

// Data argument: either a CSV path or an IDX pair "images.idx,labels.idx".
Dataset load_data(const std::string& arg, const std::string& label_column, LabelKind task) {
  const auto comma = arg.find(',');
  if (comma != std::string::npos)
    return load_idx(arg.substr(0, comma), arg.substr(comma + 1));
  return load_csv(arg, label_column, task);
}

// Re-applies the model's recorded preprocessing. The statistics are a pure
// function of (training data, method), so recomputing them on the same
// training file reproduces the training-time feature space exactly.
NormStats training_norm(const NetworkModel& m, Dataset& train) {
  NormStats stats;
  stats.method = norm_method_from(m.profile.normalize);
  if (stats.method != NormStats::Method::none) {
    train = normalize(train, stats.method);
    stats = *train.norm_stats;
  }
  return stats;
}

std::vector<double> normalized_row(const std::vector<double>& row, const NormStats& stats) {
  if (stats.method == NormStats::Method::none) return row;
  std::vector<double> out = row;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (stats.method == NormStats::Method::zscore)
      out[i] = (out[i] - stats.center[i]) / stats.scale[i];
    else
      out[i] = stats.scale[i] == 0.0 ? 0.0 : (out[i] - stats.center[i]) / stats.scale[i];
  }
  return out;
}

// Single-row CSV escape hatch for ad-hoc queries: d feature values, or d+1
// fields where the final one is ignored as a label.
std::vector<double> read_query_file(const std::string& path, std::size_t d) {
  const std::string text = read_file(path);
  std::vector<double> vals;
  std::string cur;
  bool any_line = false;
  for (char ch : text + "\n") {
    if (ch == ',' || ch == '\n' || ch == '\r') {
      if (!cur.empty()) {
        try {
          vals.push_back(std::stod(cur));
        } catch (const std::exception&) {
          throw Error("query file: cannot parse '" + cur + "' as a number");
        }
        cur.clear();
        any_line = true;
      }
      if (ch == '\n' && any_line) break;
    } else {
      cur += ch;
    }
  }
  if (vals.size() == d + 1) vals.pop_back();
  if (vals.size() != d)
    throw Error("query file has " + std::to_string(vals.size()) + " values, model expects " +
                std::to_string(d));
  return vals;
}

void write_output(const std::optional<std::string>& out, const std::string& content) {
  if (out)
    atomic_write_file(*out, content);
  else
    std::cout << content;
}

Case query_case(const Dataset& train, const NormStats& stats,
                const std::optional<std::size_t>& query_index,
                const std::optional<std::string>& query_file, std::size_t d) {
  if (query_index) {
    if (*query_index >= train.size())
      throw Error("query index " + std::to_string(*query_index) + " out of range (dataset has " +
                  std::to_string(train.size()) + " cases)");
    return train.cases[*query_index];
  }
  Case q;
  q.id = 0;
  q.features = normalized_row(read_query_file(*query_file, d), stats);
  q.label = 0.0;
  return q;
}

FeatureWeights scheme_weights(const NetworkModel& m, const CaseIndex& index,
                              const Dataset& train, Scheme scheme, const std::string& space,
                              const Case& query, std::uint64_t seed) {
  switch (scheme) {
    case Scheme::uniform:
      return uniform_weights(index.dim());
    case Scheme::surrogate: {
      SurrogateConfig cfg;
      cfg.seed = seed;
      FeatureWeights w = surrogate_weights(m, query.features, train, cfg);
      w.query_id = query.id;
      return w;
    }
    case Scheme::contribution: {
      const Tensor input = case_input(m, query);
      const Tensor baseline = default_baseline(m, train);
      FeatureWeights w =
          contribution_weights(m, input, baseline, predict(m, input).cls, space);
      w.query_id = query.id;
      return w;
    }
    default:
      return global_weights(m, train, scheme);
  }
}

// --- train ---

int cmd_train(const std::string& data_arg, const std::string& config_path,
              const std::string& out_path, std::optional<std::uint64_t> seed_flag,
              const std::string& label_column) {
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(read_file(config_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error("config: " + std::string(e.what()));
  }
  if (!cfg.contains("layers") || !cfg["layers"].is_array() || cfg["layers"].empty())
    throw Error("config: missing non-empty 'layers' array");

  const LabelKind task = label_kind_from(cfg.value("task", std::string("classification")));
  Dataset data = load_data(data_arg, cfg.value("label_column", label_column), task);

  const std::string norm = cfg.value("normalize", std::string("none"));
  if (norm_method_from(norm) != NormStats::Method::none)
    data = normalize(data, norm_method_from(norm));

  std::vector<LayerSpec> layers;
  for (const auto& lj : cfg["layers"]) layers.push_back(layer_spec_from_json(lj));

  const std::uint64_t seed = seed_flag ? *seed_flag : cfg.value("seed", std::uint64_t{42});
  InputShape shape = data.schema.input_shape;
  NetworkModel m = build(layers, task, seed, shape);

  Hyper hyper;
  if (cfg.contains("hyper")) {
    const auto& h = cfg["hyper"];
    hyper.lr = h.value("lr", hyper.lr);
    hyper.momentum = h.value("momentum", hyper.momentum);
    hyper.epochs = h.value("epochs", hyper.epochs);
    hyper.batch_size = h.value("batch_size", hyper.batch_size);
  }
  hyper.seed = seed;

  const auto t0 = std::chrono::steady_clock::now();
  TrainReport report = train(m, data, hyper);
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  m.profile.normalize = norm;
  m.profile.label_names = data.schema.label_names;
  m.profile.feature_names = data.schema.feature_names;
  save_model(m, out_path);

  std::ostringstream os;
  os << "trained " << (task == LabelKind::classification ? "classifier" : "regressor") << " on "
     << data.size() << " cases (" << m.parameter_count() << " parameters, seed " << seed
     << ")\n";
  os << "epochs: " << report.epochs << "\n";
  os << "final loss: " << std::scientific << report.epoch_loss.back() << std::defaultfloat
     << "\n";
  if (task == LabelKind::classification)
    os << "train accuracy: " << report.final_metric << "\n";
  else
    os << "train mse: " << report.final_metric << "\n";
  os << "model: " << out_path << " (fingerprint " << hex64(model_fingerprint(m)) << ")\n";
  std::cout << os.str();
  std::cerr << "runtime_ms: " << ms << "\n";
  return 0;
}

// --- explain ---

int cmd_explain(const std::string& model_path, const std::string& train_arg,
                std::optional<std::size_t> query_index, std::optional<std::string> query_file,
                const std::string& scheme_name_arg, const std::string& space, std::size_t k,
                std::size_t top_m, const std::string& format, bool with_fam,
                std::optional<std::string> out, std::uint64_t seed,
                const std::string& label_column) {
  const Scheme scheme = parse_scheme(scheme_name_arg);
  if (format != "text" && format != "json" && format != "pgm")
    throw UsageError("unknown format '" + format + "' (valid: text, json, pgm)");
  if (static_cast<bool>(query_index) == static_cast<bool>(query_file))
    throw UsageError("provide exactly one of --query and --query-file");

  NetworkModel m = load_model(model_path);
  Dataset train = load_data(train_arg, label_column, m.task);
  const NormStats stats = training_norm(m, train);

  CaseIndex index = build_index(train, space, &m);
  const Case q = query_case(train, stats, query_index, query_file, shape_count(m.input_shape));
  FeatureWeights w = scheme_weights(m, index, train, scheme, space, q, seed);

  Explanation e = explain(m, index, w, q, k,
                          top_m == 0 ? std::nullopt : std::optional<std::size_t>(top_m));
  if (with_fam) e.fam = compute_fam(m, case_input(m, q));

  const std::string rendered = render(e, train.schema, format);
  write_output(out, rendered);

  // a text/json run with --fam and --out also drops the mask as a viewable PGM
  if (with_fam && out && format != "pgm") {
    for (const PgmPanel& p : render_pgm(e, train.schema))
      if (p.name == "fam") atomic_write_file(*out + ".fam.pgm", p.bytes);
  }
  return 0;
}

// --- fam ---

int cmd_fam(const std::string& model_path, const std::string& train_arg,
            std::optional<std::size_t> query_index, std::optional<std::string> query_file,
            double quantile, const std::string& format, std::optional<std::string> out,
            const std::string& label_column) {
  if (format != "pgm" && format != "json")
    throw UsageError("unknown format '" + format + "' (valid: pgm, json)");
  if (static_cast<bool>(query_index) == static_cast<bool>(query_file))
    throw UsageError("provide exactly one of --query and --query-file");

  NetworkModel m = load_model(model_path);
  Dataset train = load_data(train_arg, label_column, m.task);
  const NormStats stats = training_norm(m, train);
  const Case q = query_case(train, stats, query_index, query_file, shape_count(m.input_shape));

  FeatureActivationMap fam = compute_fam(m, case_input(m, q), quantile);

  if (format == "json") {
    write_output(out, fam_to_json(fam).dump(2) + "\n");
    return 0;
  }

  // pgm: query panel plus overlay panel, via the explanation renderer
  Explanation e;
  e.query = q;
  e.prediction = predict(m, case_input(m, q));
  e.scheme = uniform_weights(shape_count(m.input_shape));
  e.fam = fam;
  std::ostringstream os;
  for (const PgmPanel& p : render_pgm(e, train.schema)) os << "#panel " << p.name << "\n"
                                                           << p.bytes;
  write_output(out, os.str());
  return 0;
}

// --- evaluate ---

int cmd_evaluate(const std::string& model_path, const std::string& train_arg,
                 const std::string& test_arg, const std::string& schemes_arg,
                 const std::string& space, std::size_t k, std::uint64_t seed,
                 const std::string& format, std::optional<std::string> out,
                 const std::string& label_column) {
  if (format != "table" && format != "json")
    throw UsageError("unknown format '" + format + "' (valid: table, json)");

  std::vector<SchemeSpec> specs;
  std::string cur;
  for (char ch : schemes_arg + ",") {
    if (ch == ',') {
      if (!cur.empty()) {
        SchemeSpec s;
        s.scheme = parse_scheme(cur);
        s.space = space;
        specs.push_back(s);
        cur.clear();
      }
    } else {
      cur += ch;
    }
  }
  if (specs.empty()) throw UsageError("--schemes lists no schemes (valid: " +
                                      std::string(kSchemeList) + ")");

  NetworkModel m = load_model(model_path);
  Dataset train = load_data(train_arg, label_column, m.task);
  const NormStats stats = training_norm(m, train);
  Dataset test = load_data(test_arg, label_column, m.task);
  if (stats.method != NormStats::Method::none) test = apply_normalization(test, stats);

  CaseIndex index = build_index(train, space, &m);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<FidelityReport> reports = compare_schemes(m, index, specs, test, k, seed);
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  write_output(out, format == "json" ? reports_json(reports) : reports_table(reports));
  std::cerr << "runtime_ms: " << ms << "\n";
  return 0;
}

// --- inspect ---

int cmd_inspect(const std::string& model_path, std::optional<std::string> train_arg,
                const std::string& label_column) {
  NetworkModel m = load_model(model_path);
  std::ostringstream os;
  os << "model: " << model_path << "\n";
  os << "version: " << m.version << "\n";
  os << "task: " << label_kind_name(m.task) << "\n";
  os << "input shape: " << shape_str(m.input_shape) << "\n";
  os << "seed: " << m.seed << "\n";
  os << "parameters: " << m.parameter_count() << "\n";
  os << "fingerprint: " << hex64(model_fingerprint(m)) << "\n";
  os << "normalize: " << m.profile.normalize << "\n";
  os << "layers:\n";
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    os << "  " << l.name << "  " << layer_kind_name(l.kind) << "  -> "
       << shape_str(m.acts_shape[i + 1]);
    const std::size_t n = m.params[i].weights.size() + m.params[i].bias.size();
    if (n > 0) os << "  (" << n << " params)";
    os << "\n";
  }
  if (train_arg) {
    Dataset train = load_data(*train_arg, label_column, m.task);
    training_norm(m, train);
    os << "casebase: " << train.size() << " cases, " << train.schema.feature_count
       << " features\n";
    if (m.task == LabelKind::classification) {
      std::vector<std::size_t> hist(train.schema.num_classes, 0);
      for (const Case& c : train.cases) ++hist[c.cls()];
      os << "class counts:";
      for (std::size_t i = 0; i < hist.size(); ++i) os << " " << i << ":" << hist[i];
      os << "\n";
    }
  }
  std::cout << os.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twinsys: neural network + case-based twin explanation toolkit"};
  app.require_subcommand(1);

  std::function<int()> run;

  // shared flag storage
  std::string data_arg, config_path, out_path, model_path, train_arg, test_arg;
  std::string scheme_arg = "sensitivity", space = "input", format_text = "text";
  std::string format_pgm = "pgm", format_table = "table", schemes_arg;
  std::string label_column = "label";
  std::optional<std::string> out_opt, query_file, train_opt;
  std::optional<std::size_t> query_index;
  std::optional<std::uint64_t> seed_flag;
  std::size_t k = 3, top_m = 5;
  std::uint64_t seed = 0;
  double quantile = 0.95;
  bool with_fam = false;

  auto* t = app.add_subcommand("train", "Train a network on a dataset");
  t->add_option("--data", data_arg, "CSV path, or IDX pair images,labels")->required();
  t->add_option("--config", config_path, "JSON config: layers, hyper, normalize, task")
      ->required();
  t->add_option("--out", out_path, "Output model JSON path")->required();
  t->add_option("--seed", seed_flag, "Overrides the config seed");
  t->add_option("--label", label_column, "CSV label column (default: label)");
  t->callback([&] {
    run = [&] { return cmd_train(data_arg, config_path, out_path, seed_flag, label_column); };
  });

  auto* e = app.add_subcommand("explain", "Explain one query by twin retrieval");
  e->add_option("--model", model_path, "Trained model JSON")->required();
  e->add_option("--train", train_arg, "Training data (casebase source)")->required();
  e->add_option("--query", query_index, "Query row index into the training data");
  e->add_option("--query-file", query_file, "Single-row CSV with an ad-hoc query");
  e->add_option("--scheme", scheme_arg, "Weighting scheme (default: sensitivity)");
  e->add_option("--space", space, "Retrieval space: input or layer:NAME");
  e->add_option("--k", k, "Neighbors to retrieve (default: 3)");
  e->add_option("--top-m", top_m, "Top features to list, 0 disables (default: 5)");
  e->add_option("--format", format_text, "Output: text, json, or pgm");
  e->add_flag("--fam", with_fam, "Attach a feature-activation map (conv models)");
  e->add_option("--out", out_opt, "Write output to a file instead of stdout");
  e->add_option("--seed", seed, "Seed for local-scheme sampling (default: 0)");
  e->add_option("--label", label_column, "CSV label column (default: label)");
  e->callback([&] {
    run = [&] {
      return cmd_explain(model_path, train_arg, query_index, query_file, scheme_arg, space, k,
                         top_m, format_text, with_fam, out_opt, seed, label_column);
    };
  });

  auto* f = app.add_subcommand("fam", "Feature-activation map for one query");
  f->add_option("--model", model_path, "Trained model JSON")->required();
  f->add_option("--train", train_arg, "Training data (query source)")->required();
  f->add_option("--query", query_index, "Query row index into the training data");
  f->add_option("--query-file", query_file, "Single-row CSV with an ad-hoc query");
  f->add_option("--quantile", quantile, "Highlight threshold quantile (default: 0.95)");
  f->add_option("--format", format_pgm, "Output: pgm or json");
  f->add_option("--out", out_opt, "Write output to a file instead of stdout");
  f->add_option("--label", label_column, "CSV label column (default: label)");
  f->callback([&] {
    run = [&] {
      return cmd_fam(model_path, train_arg, query_index, query_file, quantile, format_pgm,
                     out_opt, label_column);
    };
  });

  auto* v = app.add_subcommand("evaluate", "Compare weighting schemes by twin fidelity");
  v->add_option("--model", model_path, "Trained model JSON")->required();
  v->add_option("--train", train_arg, "Training data (casebase source)")->required();
  v->add_option("--test", test_arg, "Held-out test data")->required();
  v->add_option("--schemes", schemes_arg, "Comma-separated scheme names")->required();
  v->add_option("--space", space, "Retrieval space: input or layer:NAME");
  v->add_option("--k", k, "Neighbors to retrieve (default: 3)");
  v->add_option("--seed", seed, "Evaluation seed (default: 0)");
  v->add_option("--format", format_table, "Output: table or json");
  v->add_option("--out", out_opt, "Write output to a file instead of stdout");
  v->add_option("--label", label_column, "CSV label column (default: label)");
  v->callback([&] {
    run = [&] {
      return cmd_evaluate(model_path, train_arg, test_arg, schemes_arg, space, k, seed,
                          format_table, out_opt, label_column);
    };
  });

  auto* i = app.add_subcommand("inspect", "Describe a saved model (and optional casebase)");
  i->add_option("--model", model_path, "Trained model JSON")->required();
  i->add_option("--train", train_opt, "Training data to summarize against the model");
  i->add_option("--label", label_column, "CSV label column (default: label)");
  i->callback([&] {
    run = [&] { return cmd_inspect(model_path, train_opt, label_column); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& help) {
    return app.exit(help);
  } catch (const CLI::ParseError& pe) {
    app.exit(pe);
    return 2;
  }

  try {
    return run();
  } catch (const UsageError& ue) {
    std::cerr << "usage error: " << ue.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
}
