#include "run_config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace viewdelta::cli {

using json = nlohmann::ordered_json;

namespace {

template <typename T>
void get(const json& j, const char* section, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(field);
  } catch (const json::exception& e) {
    throw ConfigError(std::string(section) + "." + key, e.what());
  }
}

void reject_unknown(const json& j, const char* section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(section, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) {
      throw ConfigError(std::string(section).empty() ? it.key() : std::string(section) + "." + it.key(),
                        "unknown field");
    }
  }
}

// Library parsers report bare field names; prefix them with the section.
template <typename Fn>
auto parse_section(const char* section, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    throw ConfigError(std::string(section) + "." + e.field(), what.substr(e.field().size() + 2));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(section, e.what());
  }
}

}  // namespace

EmptyPairPolicy parse_empty_policy(const std::string& text) {
  if (text == "score_one") return EmptyPairPolicy::score_one;
  if (text == "skip") return EmptyPairPolicy::skip;
  throw ConfigError("eval.empty_policy", "expected score_one or skip, got '" + text + "'");
}

void RunConfig::validate() const {
  parse_section("model", [&] { model.validate(); });
  parse_section("train", [&] { train.validate(); });
  parse_section("generator", [&] { generator.validate(); });
  if (dataset.n_pairs == 0) throw ConfigError("dataset.n_pairs", "must be positive");
  if (!(dataset.all_fraction >= 0.0 && dataset.all_fraction <= 1.0)) {
    throw ConfigError("dataset.all_fraction", "must lie in [0, 1]");
  }
  if (!(dataset.split_ratio >= 0.0 && dataset.split_ratio <= 1.0)) {
    throw ConfigError("dataset.split_ratio", "must lie in [0, 1]");
  }
  Protocol p;
  try {
    p = parse_protocol(eval.protocol);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("eval.protocol", e.what());
  }
  if (p == Protocol::fixed && eval.fixed_prompt.empty()) {
    throw ConfigError("eval.fixed_prompt", "required by the fixed protocol");
  }
  if (eval.split != "train" && eval.split != "test" && eval.split != "all") {
    throw ConfigError("eval.split", "expected train, test or all");
  }
  try {
    parse_empty_policy(eval.empty_policy);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("eval.empty_policy", e.what());
  }
  if (!verify.inject_fault.empty() && verify.inject_fault != "gelu" && verify.inject_fault != "matmul" &&
      verify.inject_fault != "layer_norm") {
    throw ConfigError("verify.inject_fault", "expected gelu, matmul or layer_norm");
  }
  if (!(verify.tolerance > 0.0)) throw ConfigError("verify.tolerance", "must be positive");
}

DatasetOptions RunConfig::dataset_options() const {
  DatasetOptions o;
  o.n_pairs = dataset.n_pairs;
  o.all_fraction = dataset.all_fraction;
  o.split_ratio = dataset.split_ratio;
  o.seed = dataset.seed;
  o.generator = generator;
  return o;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions o;
  o.protocol = parse_protocol(eval.protocol);
  o.fixed_prompt = eval.fixed_prompt;
  o.classes = eval.classes;
  o.split = eval.split;
  o.empty_policy = parse_empty_policy(eval.empty_policy);
  return o;
}

RunConfig run_config_from_json(std::string_view text, const RunConfig& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("config", e.what());
  }
  reject_unknown(j, "", {"precision", "model", "train", "generator", "dataset", "eval", "verify", "paths"});
  RunConfig c = base;
  if (j.contains("precision")) {
    try {
      c.precision = parse_precision(j.at("precision").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError("precision", e.what());
    }
  }
  if (j.contains("model")) c.model = parse_section("model", [&] { return model_config_from_json(j["model"].dump()); });
  if (j.contains("train")) c.train = parse_section("train", [&] { return train_config_from_json(j["train"].dump()); });
  if (j.contains("generator")) {
    c.generator = parse_section("generator", [&] { return generator_config_from_json(j["generator"].dump()); });
  }
  if (j.contains("dataset")) {
    const json& s = j["dataset"];
    reject_unknown(s, "dataset", {"n_pairs", "all_fraction", "split_ratio", "seed"});
    get(s, "dataset", "n_pairs", c.dataset.n_pairs);
    get(s, "dataset", "all_fraction", c.dataset.all_fraction);
    get(s, "dataset", "split_ratio", c.dataset.split_ratio);
    get(s, "dataset", "seed", c.dataset.seed);
  }
  if (j.contains("eval")) {
    const json& s = j["eval"];
    reject_unknown(s, "eval", {"protocol", "fixed_prompt", "classes", "split", "empty_policy", "overlays"});
    get(s, "eval", "protocol", c.eval.protocol);
    get(s, "eval", "fixed_prompt", c.eval.fixed_prompt);
    get(s, "eval", "classes", c.eval.classes);
    get(s, "eval", "split", c.eval.split);
    get(s, "eval", "empty_policy", c.eval.empty_policy);
    get(s, "eval", "overlays", c.eval.overlays);
  }
  if (j.contains("verify")) {
    const json& s = j["verify"];
    reject_unknown(s, "verify", {"generator_pairs", "occlusion_pairs", "tolerance", "inject_fault"});
    get(s, "verify", "generator_pairs", c.verify.generator_pairs);
    get(s, "verify", "occlusion_pairs", c.verify.occlusion_pairs);
    get(s, "verify", "tolerance", c.verify.tolerance);
    get(s, "verify", "inject_fault", c.verify.inject_fault);
  }
  if (j.contains("paths")) {
    const json& s = j["paths"];
    reject_unknown(s, "paths", {"data", "out", "checkpoint"});
    get(s, "paths", "data", c.paths.data);
    get(s, "paths", "out", c.paths.out);
    get(s, "paths", "checkpoint", c.paths.checkpoint);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(ss.str(), base);
}

std::string to_json(const RunConfig& c) {
  json j;
  j["precision"] = std::string(to_string(c.precision));
  j["model"] = json::parse(to_json(c.model));
  j["train"] = json::parse(to_json(c.train));
  j["generator"] = json::parse(to_json(c.generator));
  j["dataset"] = {{"n_pairs", c.dataset.n_pairs},
                  {"all_fraction", c.dataset.all_fraction},
                  {"split_ratio", c.dataset.split_ratio},
                  {"seed", c.dataset.seed}};
  j["eval"] = {{"protocol", c.eval.protocol},   {"fixed_prompt", c.eval.fixed_prompt},
               {"classes", c.eval.classes},     {"split", c.eval.split},
               {"empty_policy", c.eval.empty_policy}, {"overlays", c.eval.overlays}};
  j["verify"] = {{"generator_pairs", c.verify.generator_pairs},
                 {"occlusion_pairs", c.verify.occlusion_pairs},
                 {"tolerance", c.verify.tolerance},
                 {"inject_fault", c.verify.inject_fault}};
  j["paths"] = {{"data", c.paths.data}, {"out", c.paths.out}, {"checkpoint", c.paths.checkpoint}};
  return j.dump(2) + "\n";
}

std::filesystem::path write_resolved(const RunConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = dir / "resolved_config.json";
  std::ofstream out(path);
  out << to_json(config);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return path;
}

}  // namespace viewdelta::cli
