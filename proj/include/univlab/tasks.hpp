#pragma once

// Labeled task instances shared by the corpus generator, the constructed-model
// probes and the patching experiments.
//
// Induction: [bos] [A] [B] filler... [A], answer B, A2 - A1 = distance.
// IOI: a template with IO and S name slots, S repeated once, answer IO.

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "univlab/models.hpp"

namespace univlab {

enum class TaskKind { induction, ioi };

enum class Corruption {
  none,       // corrupted == clean
  b_corrupt,  // [A][B']...[A]
  a_corrupt,  // [A'][B]...[A]
  ioi_names,  // [IO'][S']...[S']
};

const char* to_string(Corruption c);
Corruption parse_corruption(std::string_view s);

struct TaskInstance {
  TaskKind kind = TaskKind::induction;
  TokenSeq clean;
  TokenSeq corrupted;
  // "A1", "B1", "A2" or "IO", "S1", "S2"
  std::map<std::string, std::size_t> labels;
  TokenId answer = 0;      // B, or IO
  TokenId distractor = 0;  // S for IOI, unused for induction
  std::size_t distance = 0;

  std::size_t label(const std::string& name) const;
};

// Token ids 1..vocab-1 are usable; 0 is bos. Throws config error when the
// vocabulary cannot supply distinct A, B, corruptions and filler.
TaskInstance make_induction_task(std::size_t vocab, std::size_t distance, Corruption corruption,
                                 std::mt19937_64& rng, TokenId bos = 0);

TokenSeq corrupt_induction(const TaskInstance& clean_task, Corruption corruption, std::mt19937_64& rng,
                           std::size_t vocab);

// Fixed IOI vocabulary: bos = 0, 32 names at ids 1..32, then template words.
struct IoiVocab {
  static constexpr std::size_t kNames = 32;
  static constexpr TokenId kFirstName = 1;

  std::vector<std::string> words;  // id -> text
  std::vector<std::vector<std::string>> templates;

  static const IoiVocab& get();
  std::size_t size() const { return words.size(); }
  bool is_name(TokenId t) const { return t >= kFirstName && t < kFirstName + kNames; }
  TokenId id(const std::string& word) const;
};

// Template index drawn uniformly from 8; IO-first and S-first orders alternate
// by a fair coin.
TaskInstance make_ioi_task(std::mt19937_64& rng, Corruption corruption = Corruption::ioi_names);

}  // namespace univlab
