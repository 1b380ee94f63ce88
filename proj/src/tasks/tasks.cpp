#include "univlab/tasks.hpp"

#include <algorithm>
#include <sstream>

#include "univlab/error.hpp"

namespace univlab {

namespace {

TokenId draw_excluding(std::mt19937_64& rng, std::size_t vocab, std::initializer_list<TokenId> banned,
                       TokenId bos) {
  std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab - 1));
  for (;;) {
    const TokenId t = pick(rng);
    if (t == bos) continue;
    if (std::find(banned.begin(), banned.end(), t) != banned.end()) continue;
    return t;
  }
}

const char* const kNameList[IoiVocab::kNames] = {
    "Mary",  "John",   "Alice", "Bob",    "Sarah", "James",  "Laura", "David", "Emma",  "Henry", "Julia",
    "Kevin", "Linda",  "Mark",  "Nora",   "Oscar", "Paula",  "Quinn", "Rita",  "Simon", "Tina",  "Victor",
    "Wendy", "Xavier", "Yara",  "Zach",   "Clara", "Felix",  "Grace", "Ivan",  "Helen", "Peter",
};

// Three name mentions per template; the third is always the repeated subject.
const char* const kTemplates[] = {
    "When {A} and {B} went to the store , {B} gave a drink to",
    "When {A} and {B} went to the park , {B} handed a ball to",
    "Then , {A} and {B} had a long argument , and afterwards {B} said to",
    "After {A} and {B} went to the school , {B} gave a book to",
    "While {A} and {B} were working at the office , {B} gave a report to",
    "Friends {A} and {B} found a bone at the park . {B} gave it to",
    "Then , {A} and {B} were thinking about going to the market . {B} wanted to give a gift to",
    "The {A} and {B} went to the house , and {B} brought the cake to",
};

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

const char* to_string(Corruption c) {
  switch (c) {
    case Corruption::none: return "none";
    case Corruption::b_corrupt: return "b-corrupt";
    case Corruption::a_corrupt: return "a-corrupt";
    case Corruption::ioi_names: return "ioi-names";
  }
  return "unknown";
}

Corruption parse_corruption(std::string_view s) {
  for (Corruption c : {Corruption::none, Corruption::b_corrupt, Corruption::a_corrupt, Corruption::ioi_names})
    if (s == to_string(c)) return c;
  throw Error(ErrorKind::usage, "unknown corruption '" + std::string(s) + "'");
}

std::size_t TaskInstance::label(const std::string& name) const {
  auto it = labels.find(name);
  UNIV_CHECK(it != labels.end(), contract, "task has no label '" + name + "'");
  return it->second;
}

TaskInstance make_induction_task(std::size_t vocab, std::size_t distance, Corruption corruption,
                                 std::mt19937_64& rng, TokenId bos) {
  UNIV_CHECK(vocab >= 8, config, "induction task: vocab must be >= 8");
  UNIV_CHECK(distance >= 2, config, "induction task: distance must be >= 2");
  UNIV_CHECK(corruption != Corruption::ioi_names, config, "induction task: ioi corruption requested");
  TaskInstance t;
  t.kind = TaskKind::induction;
  t.distance = distance;
  const TokenId a = draw_excluding(rng, vocab, {}, bos);
  const TokenId b = draw_excluding(rng, vocab, {a}, bos);
  t.clean.push_back(bos);
  t.clean.push_back(a);
  t.clean.push_back(b);
  for (std::size_t k = 0; k + 2 < distance; ++k) t.clean.push_back(draw_excluding(rng, vocab, {a, b}, bos));
  t.clean.push_back(a);
  t.labels = {{"A1", 1}, {"B1", 2}, {"A2", 1 + distance}};
  t.answer = b;
  t.corrupted = corrupt_induction(t, corruption, rng, vocab);
  return t;
}

TokenSeq corrupt_induction(const TaskInstance& task, Corruption corruption, std::mt19937_64& rng,
                           std::size_t vocab) {
  TokenSeq out = task.clean;
  const TokenId bos = task.clean.front();
  const std::size_t a1 = task.label("A1"), b1 = task.label("B1");
  const TokenId a = task.clean[a1], b = task.clean[b1];
  // The replacement avoids every token already in the sequence so the
  // corrupted run carries no accidental binding.
  auto fresh = [&]() {
    std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(vocab - 1));
    for (int tries = 0; tries < 10000; ++tries) {
      const TokenId c = pick(rng);
      if (c == bos || std::find(task.clean.begin(), task.clean.end(), c) != task.clean.end()) continue;
      return c;
    }
    return draw_excluding(rng, vocab, {a, b}, bos);
  };
  switch (corruption) {
    case Corruption::none: break;
    case Corruption::b_corrupt: out[b1] = fresh(); break;
    case Corruption::a_corrupt: out[a1] = fresh(); break;
    case Corruption::ioi_names: throw Error(ErrorKind::config, "induction task: ioi corruption requested");
  }
  return out;
}

const IoiVocab& IoiVocab::get() {
  static const IoiVocab vocab = [] {
    IoiVocab v;
    v.words.push_back("<bos>");
    for (const char* n : kNameList) v.words.push_back(n);
    for (const char* t : kTemplates) {
      auto words = split_words(t);
      for (const auto& w : words) {
        if (w == "{A}" || w == "{B}") continue;
        if (std::find(v.words.begin(), v.words.end(), w) == v.words.end()) v.words.push_back(w);
      }
      v.templates.push_back(std::move(words));
    }
    return v;
  }();
  return vocab;
}

TokenId IoiVocab::id(const std::string& word) const {
  auto it = std::find(words.begin(), words.end(), word);
  UNIV_CHECK(it != words.end(), config, "ioi vocab: unknown word '" + word + "'");
  return static_cast<TokenId>(it - words.begin());
}

TaskInstance make_ioi_task(std::mt19937_64& rng, Corruption corruption) {
  UNIV_CHECK(corruption == Corruption::ioi_names || corruption == Corruption::none, config,
             "ioi task: only ioi-names or none corruption applies");
  const IoiVocab& v = IoiVocab::get();
  std::uniform_int_distribution<std::size_t> pick_t(0, v.templates.size() - 1);
  std::uniform_int_distribution<TokenId> pick_n(IoiVocab::kFirstName,
                                                IoiVocab::kFirstName + IoiVocab::kNames - 1);
  const auto& tpl = v.templates[pick_t(rng)];
  const bool io_first = std::bernoulli_distribution(0.5)(rng);

  TokenId names[4];
  for (int k = 0; k < 4; ++k) {
    for (;;) {
      names[k] = pick_n(rng);
      if (std::find(names, names + k, names[k]) == names + k) break;
    }
  }
  const TokenId io = names[0], s = names[1], io_c = names[2], s_c = names[3];

  TaskInstance t;
  t.kind = TaskKind::ioi;
  t.answer = io;
  t.distractor = s;
  t.clean.push_back(0);
  t.corrupted.push_back(0);
  int occurrence = 0;
  for (const auto& w : tpl) {
    const std::size_t pos = t.clean.size();
    if (w == "{A}" || w == "{B}") {
      // Mentions 0 and 1 introduce both names in template order; mention 2 repeats S.
      const bool is_io = occurrence < 2 && ((occurrence == 0) == io_first);
      ++occurrence;
      t.clean.push_back(is_io ? io : s);
      t.corrupted.push_back(is_io ? io_c : s_c);
      if (is_io) {
        t.labels["IO"] = pos;
      } else if (!t.labels.count("S1")) {
        t.labels["S1"] = pos;
      } else {
        t.labels["S2"] = pos;
      }
    } else {
      t.clean.push_back(v.id(w));
      t.corrupted.push_back(v.id(w));
    }
  }
  if (corruption == Corruption::none) t.corrupted = t.clean;
  return t;
}

}  // namespace univlab
