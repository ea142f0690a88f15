#include "factorforge/corpus.hpp"

#include "factorforge/parallel.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>

namespace factorforge {

TokenGrid CorpusRecord::grid(int w_max) const {
  TokenGrid g;
  g.rows = m;
  g.width = grid_width(w_max);
  if (points.size() != static_cast<std::size_t>(g.rows) * g.width)
    throw DataError("corpus record " + std::to_string(index) + ": point grid does not match w_max");
  g.ids = points;
  return g;
}

nlohmann::ordered_json CorpusRecord::to_json() const {
  nlohmann::ordered_json j;
  j["index"] = index;
  j["seed"] = seed;
  j["W"] = w;
  j["M"] = m;
  j["points"] = points;
  j["expr"] = expr;
  j["infix"] = infix;
  return j;
}

CorpusRecord CorpusRecord::from_json(const nlohmann::json& j) {
  CorpusRecord r;
  r.index = j.at("index").get<std::uint64_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.w = j.at("W").get<int>();
  r.m = j.at("M").get<int>();
  r.points = j.at("points").get<std::vector<TokenId>>();
  r.expr = j.at("expr").get<std::vector<TokenId>>();
  r.infix = j.at("infix").get<std::string>();
  return r;
}

nlohmann::ordered_json CorpusManifest::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "factorforge-corpus/1";
  j["master_seed"] = master_seed;
  j["count"] = count;
  j["config_hash"] = config_hash;
  j["generator"] = generator.to_json();
  return j;
}

CorpusManifest CorpusManifest::from_json(const nlohmann::json& j) {
  CorpusManifest m;
  m.master_seed = j.at("master_seed").get<std::uint64_t>();
  m.count = j.at("count").get<std::uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.generator = GeneratorConfig::from_json(j.at("generator"));
  return m;
}

std::filesystem::path manifest_path(const std::filesystem::path& corpus) {
  std::filesystem::path p = corpus;
  p += ".manifest.json";
  return p;
}

std::string config_hash(const GeneratorConfig& cfg) {
  const std::string dump = cfg.to_json().dump();
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

CorpusRecord make_record(const TrainingSample& sample, std::uint64_t index, const Vocabulary& vocab) {
  CorpusRecord r;
  r.index = index;
  if (const auto* o = std::get_if<SyntheticOrigin>(&sample.bag.origin)) r.seed = o->seed;
  r.w = sample.bag.w;
  r.m = sample.bag.m();
  r.points = encode_points(sample.bag, vocab).ids;
  r.expr = encode_expression(sample.expr, vocab).ids;
  r.infix = to_infix(sample.expr);
  return r;
}

std::vector<CorpusRecord> generate_records(const GeneratorConfig& cfg, std::uint64_t master_seed,
                                           std::uint64_t begin, std::uint64_t count, int threads) {
  cfg.validate();
  const Vocabulary vocab(cfg.w_max);
  std::vector<CorpusRecord> out(count);
  parallel_for(count, threads, [&](std::size_t i) {
    const std::uint64_t index = begin + i;
    out[i] = make_record(make_training_sample(cfg, master_seed, index), index, vocab);
  });
  return out;
}

void write_corpus(const std::filesystem::path& out, const GeneratorConfig& cfg,
                  std::uint64_t master_seed, std::uint64_t count, int threads) {
  cfg.validate();
  if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
  std::ofstream os(out, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open corpus for writing: " + out.string());
  constexpr std::uint64_t kChunk = 4096;
  for (std::uint64_t begin = 0; begin < count; begin += kChunk) {
    const std::uint64_t n = std::min(kChunk, count - begin);
    for (const auto& r : generate_records(cfg, master_seed, begin, n, threads))
      os << r.to_json().dump() << '\n';
  }
  if (!os) throw DataError("write failed: " + out.string());

  CorpusManifest manifest;
  manifest.generator = cfg;
  manifest.master_seed = master_seed;
  manifest.count = count;
  manifest.config_hash = config_hash(cfg);
  std::ofstream ms(manifest_path(out), std::ios::binary | std::ios::trunc);
  if (!ms) throw DataError("cannot open manifest for writing: " + manifest_path(out).string());
  ms << manifest.to_json().dump(2) << '\n';
}

std::vector<CorpusRecord> load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open corpus: " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(CorpusRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

CorpusManifest load_manifest(const std::filesystem::path& corpus) {
  const auto p = manifest_path(corpus);
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot open corpus manifest: " + p.string());
  try {
    return CorpusManifest::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

}  // namespace factorforge
