#pragma once

// Config-driven pipeline stages behind the command-line tool. Each artifact
// gets a `<name>.manifest.json` recording the stage config hash, seed, tool
// version and CRC64 of every output; a stage whose manifest matches is
// skipped, one built from a different config is refused unless forced.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "univlab/error.hpp"
#include "univlab/patching.hpp"

namespace univlab {

inline constexpr const char* kToolVersion = "univlab 1.0";

struct RunOptions {
  std::filesystem::path out_dir = "univlab-out";
  std::optional<std::uint64_t> seed;  // overrides the config's base seed
  std::size_t threads = 0;
  bool force = false;
  std::vector<std::string> only;  // restrict a stage to these entry names
};

enum class StageOutcome { built, skipped };

struct StageLog {
  std::string stage;
  std::string name;
  StageOutcome outcome = StageOutcome::built;
  std::string config_hash;
};

struct PatchCommand {
  std::string sweep;  // sweep-states | sweep-ssm | sweep-conv | ioi
  std::optional<Corruption> corruption;
  std::optional<FreezePolicy> policy;
};

class Pipeline {
 public:
  // Unknown top-level sections and malformed entries throw config errors.
  Pipeline(nlohmann::json config, RunOptions options);
  static Pipeline from_file(const std::filesystem::path& config, RunOptions options);

  void build_models();
  void harvest();  // corpora, synthetic pairs, model activations
  void train_saes();
  void mppc();
  void patch(const PatchCommand& cmd);
  void autointerp();
  void report();

  std::uint64_t base_seed() const;
  std::string config_hash() const;
  const std::vector<StageLog>& log() const { return log_; }
  const std::filesystem::path& out_dir() const { return opts_.out_dir; }

 private:
  struct Impl;
  nlohmann::json cfg_;
  RunOptions opts_;
  std::vector<StageLog> log_;

  friend struct Impl;
};

struct SynthBenchOptions {
  std::size_t d = 64;
  std::size_t f_true = 256;
  std::size_t f = 512;
  std::size_t samples = 200000;
  bool rotated = false;
  std::uint64_t seed = 1;
  std::size_t epochs = 5;
  std::size_t batch = 128;
  double lambda_l1 = 0.5;
  double lr = 3e-3;
  bool neuron_baseline = true;
};

// Planted (or rotated) pair -> two SAEs -> MPPC, plus the raw-neuron baseline
// and kernel timings; returns a JSON summary.
nlohmann::json synth_bench(const SynthBenchOptions& o);

}  // namespace univlab
