#include "factorforge/config.hpp"

#include "factorforge/rng.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <map>
#include <set>

namespace factorforge {

namespace {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

// Keys that exist in a section's JSON form but are derived, not set.
const std::map<std::string, std::set<std::string>> kDerivedKeys = {
    {"model", {"encoder_vocab", "decoder_vocab"}},
    {"train", {"seed"}},
    {"infer", {"seed"}},
};

const std::vector<std::string> kSections = {"run", "generator", "model", "train", "infer", "eval"};

// Parses a literal: JSON syntax first, bare words as strings.
Json parse_literal(const std::string& text) {
  std::string t = text;
  const auto first = t.find_first_not_of(" \t");
  const auto last = t.find_last_not_of(" \t");
  t = first == std::string::npos ? "" : t.substr(first, last - first + 1);
  if (t == "true" || t == "false" || t.empty() || t.front() == '"' || t.front() == '[' || t.front() == '-' ||
      std::isdigit(static_cast<unsigned char>(t.front())) || t.front() == '.') {
    try {
      return Json::parse(t);
    } catch (const Json::exception&) {
      if (!t.empty() && (t.front() == '"' || t.front() == '[')) throw;
    }
  }
  return t;
}

// Converts `value` to the JSON type of `like`, or throws.
Json coerce(const Json& like, const Json& value, const std::string& key) {
  auto fail = [&]() -> Json {
    throw ConfigError(key + ": expected " + std::string(like.type_name()) + ", got '" + value.dump() + "'");
  };
  if (like.is_boolean()) return value.is_boolean() ? value : fail();
  if (like.is_number_integer() || like.is_number_unsigned()) {
    if (value.is_number_integer() || value.is_number_unsigned()) return value;
    if (value.is_number_float() && value.get<double>() == std::floor(value.get<double>()))
      return static_cast<std::int64_t>(value.get<double>());
    return fail();
  }
  if (like.is_number_float()) return value.is_number() ? Json(value.get<double>()) : fail();
  if (like.is_string()) return value.is_string() ? value : fail();
  if (like.is_array()) {
    if (value.is_string()) {
      // Bare comma-separated list.
      Json list = Json::array();
      std::istringstream is(value.get<std::string>());
      for (std::string item; std::getline(is, item, ',');) {
        const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
        if (b != std::string::npos) list.push_back(item.substr(b, e - b + 1));
      }
      return list;
    }
    if (!value.is_array()) return fail();
    for (const auto& v : value)
      if (!v.is_string()) return fail();
    return value;
  }
  return fail();
}

template <class T>
T rebuild(const OrderedJson& j, const std::string& section) {
  try {
    return T::from_json(j);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(section + ": " + e.what());
  }
}

OrderedJson run_json(const RunSettings& r) {
  return {{"preset", r.preset}, {"seed", r.seed}, {"threads", r.threads}};
}

using Assignments = std::map<std::string, std::map<std::string, Json>>;

void assign(Assignments& out, const std::string& section, const std::string& key, const Json& value,
            const std::string& where) {
  if (std::find(kSections.begin(), kSections.end(), section) == kSections.end())
    throw ConfigError(where + ": unknown section [" + section + "]");
  out[section][key] = value;
}

void parse_override(Assignments& out, const std::string& text) {
  const auto eq = text.find('=');
  const auto dot = text.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override '" + text + "' is not of the form section.key=value");
  try {
    assign(out, text.substr(0, dot), text.substr(dot + 1, eq - dot - 1), parse_literal(text.substr(eq + 1)),
           "override '" + text + "'");
  } catch (const Json::exception& e) {
    throw ConfigError("override '" + text + "': " + e.what());
  }
}

void parse_file(Assignments& out, const std::filesystem::path& file) {
  std::ifstream is(file);
  if (!is) throw DataError("cannot open config " + file.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(file.string() + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(file.string() + ": key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      try {
        assign(out, section, key, parse_literal(value.data()), file.string());
      } catch (const Json::exception& e) {
        throw ConfigError(file.string() + ": " + section + "." + key + ": " + e.what());
      }
    }
  }
}

template <class T>
T apply_section(const T& base, const std::string& section, const std::map<std::string, Json>& values) {
  OrderedJson j = base.to_json();
  const auto derived = kDerivedKeys.count(section) ? kDerivedKeys.at(section) : std::set<std::string>{};
  for (const auto& [key, value] : values) {
    if (!j.contains(key) || derived.count(key)) throw ConfigError("unknown key " + section + "." + key);
    j[key] = coerce(j[key], value, section + "." + key);
  }
  return rebuild<T>(j, section);
}

RunConfig resolve(const Assignments& a) {
  RunSettings run;
  if (auto it = a.find("run"); it != a.end()) {
    OrderedJson j = run_json(run);
    for (const auto& [key, value] : it->second) {
      if (!j.contains(key)) throw ConfigError("unknown key run." + key);
      j[key] = coerce(j[key], value, "run." + key);
    }
    run.preset = j["preset"].get<std::string>();
    run.seed = j["seed"].get<std::uint64_t>();
    run.threads = j["threads"].get<int>();
    if (run.threads < 0) throw ConfigError("run.threads must be >= 0");
  }
  RunConfig cfg = RunConfig::preset(run.preset);
  cfg.run = run;
  auto section = [&](const std::string& name) {
    const auto it = a.find(name);
    return it == a.end() ? std::map<std::string, Json>{} : it->second;
  };
  cfg.generator = apply_section(cfg.generator, "generator", section("generator"));
  const auto model_values = section("model");
  ModelConfig model = cfg.model;
  if (!model_values.count("w_max")) model.w_max = cfg.generator.w_max;
  cfg.model = apply_section(model, "model", model_values).with_vocab();
  try {
    cfg.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  cfg.train = apply_section(cfg.train, "train", section("train"));
  cfg.train.seed = cfg.train_seed();
  cfg.infer = apply_section(cfg.infer, "infer", section("infer"));
  cfg.infer.seed = cfg.infer_seed();
  cfg.infer.threads = cfg.run.threads;
  cfg.eval = apply_section(cfg.eval, "eval", section("eval"));
  return cfg;
}

}  // namespace

void EvalConfig::validate() const {
  if (!(corr_threshold >= 0.0 && corr_threshold <= 1.0)) throw ConfigError("eval.corr_threshold must be in [0, 1]");
  if (pool_cap < 1) throw ConfigError("eval.pool_cap must be >= 1");
  if (top_k < 1) throw ConfigError("eval.top_k must be >= 1");
  if (!(cost_rate >= 0.0)) throw ConfigError("eval.cost_rate must be >= 0");
  if (lookback_days < 1) throw ConfigError("eval.lookback_days must be >= 1");
}

OrderedJson EvalConfig::to_json() const {
  return {{"corr_threshold", corr_threshold},
          {"pool_cap", pool_cap},
          {"top_k", top_k},
          {"cost_rate", cost_rate},
          {"lookback_days", lookback_days}};
}

EvalConfig EvalConfig::from_json(const Json& j) {
  EvalConfig c;
  c.corr_threshold = j.value("corr_threshold", c.corr_threshold);
  c.pool_cap = j.value("pool_cap", c.pool_cap);
  c.top_k = j.value("top_k", c.top_k);
  c.cost_rate = j.value("cost_rate", c.cost_rate);
  c.lookback_days = j.value("lookback_days", c.lookback_days);
  c.validate();
  return c;
}

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig cfg;
  cfg.run.preset = name;
  if (name == "paper") {
    cfg.model = ModelConfig::paper();
  } else if (name == "toy") {
    cfg.generator = GeneratorConfig::toy();
    cfg.model = ModelConfig::toy(cfg.generator.w_max);
  } else {
    throw ConfigError("run.preset must be \"paper\" or \"toy\", got \"" + name + "\"");
  }
  cfg.train.seed = cfg.train_seed();
  cfg.infer.seed = cfg.infer_seed();
  return cfg;
}

std::uint64_t RunConfig::train_seed() const { return stream_seed(run.seed, 1); }
std::uint64_t RunConfig::infer_seed() const { return stream_seed(run.seed, 2); }

OrderedJson RunConfig::to_json() const {
  return {{"run", run_json(run)},
          {"generator", generator.to_json()},
          {"model", model.to_json()},
          {"train", train.to_json()},
          {"infer", infer.to_json()},
          {"eval", eval.to_json()}};
}

RunConfig load_run_config(const std::filesystem::path& file, std::span<const std::string> overrides) {
  Assignments a;
  if (!file.empty()) parse_file(a, file);
  for (const auto& o : overrides) parse_override(a, o);
  return resolve(a);
}

RunConfig load_run_config(std::span<const std::string> overrides) { return load_run_config({}, overrides); }

void write_config_snapshot(const RunConfig& cfg, const std::filesystem::path& path, const OrderedJson& extra) {
  OrderedJson j = cfg.to_json();
  for (const auto& [k, v] : extra.items()) j[k] = v;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace factorforge
