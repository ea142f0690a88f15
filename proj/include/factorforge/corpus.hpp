#pragma once

#include "factorforge/codec.hpp"
#include "factorforge/synth.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace factorforge {

// One training pair as stored in the NDJSON corpus.
struct CorpusRecord {
  std::uint64_t index = 0;
  std::uint64_t seed = 0;  // per-sample stream seed
  int w = 0;
  int m = 0;
  std::vector<TokenId> points;  // m x 3(w_max + 1) encoder ids, row-major
  std::vector<TokenId> expr;    // decoder ids, BOS ... EOS
  std::string infix;

  TokenGrid grid(int w_max) const;
  nlohmann::ordered_json to_json() const;
  static CorpusRecord from_json(const nlohmann::json& j);
};

struct CorpusManifest {
  GeneratorConfig generator;
  std::uint64_t master_seed = 0;
  std::uint64_t count = 0;
  std::string config_hash;

  nlohmann::ordered_json to_json() const;
  static CorpusManifest from_json(const nlohmann::json& j);
};

std::filesystem::path manifest_path(const std::filesystem::path& corpus);

// Hex FNV-1a of the generator config's JSON dump.
std::string config_hash(const GeneratorConfig& cfg);

CorpusRecord make_record(const TrainingSample& sample, std::uint64_t index, const Vocabulary& vocab);

// Samples [begin, begin + count) of the corpus seeded with master_seed. The
// result does not depend on `threads`.
std::vector<CorpusRecord> generate_records(const GeneratorConfig& cfg, std::uint64_t master_seed,
                                           std::uint64_t begin, std::uint64_t count, int threads);

// Writes the NDJSON corpus and its manifest next to it.
void write_corpus(const std::filesystem::path& out, const GeneratorConfig& cfg,
                  std::uint64_t master_seed, std::uint64_t count, int threads);

std::vector<CorpusRecord> load_corpus(const std::filesystem::path& path);
CorpusManifest load_manifest(const std::filesystem::path& corpus);

}  // namespace factorforge
