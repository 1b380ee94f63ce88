#include "univlab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "univlab/autointerp.hpp"
#include "univlab/harvest.hpp"
#include "univlab/mppc.hpp"
#include "univlab/parallel.hpp"
#include "univlab/sae.hpp"
#include "univlab/simd.hpp"
#include "univlab/tensor_io.hpp"

namespace univlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::set<std::string> kSections = {"seed",  "models", "corpora",    "synthetic", "harvest",
                                         "saes",  "mppc",   "patch",      "autointerp", "report"};

std::string hash_json(const json& j) { return crc64_hex(j.dump()); }

std::string file_crc(const fs::path& p) { return crc64_hex(read_file(p)); }

void write_text(const fs::path& p, const std::string& s) { write_file_atomic(p, s); }

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::value, p.string() + ": " + e.what());
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

const json& section(const json& cfg, const char* name) {
  static const json empty = json::object();
  return cfg.contains(name) ? cfg.at(name) : empty;
}

const json& entry(const json& cfg, const char* sec, const std::string& name) {
  const json& s = section(cfg, sec);
  UNIV_CHECK(s.contains(name), config, std::string("config: no ") + sec + " entry '" + name + "'");
  return s.at(name);
}

}  // namespace

struct Pipeline::Impl {
  Pipeline& p;

  json& cfg() { return p.cfg_; }
  const RunOptions& opts() { return p.opts_; }

  bool selected(const std::string& name) {
    return p.opts_.only.empty() || std::find(p.opts_.only.begin(), p.opts_.only.end(), name) != p.opts_.only.end();
  }

  // Explicit entry seed, or one derived from the base seed and the entry path.
  std::uint64_t seed_of(const json& e, const std::string& path) {
    if (e.contains("seed")) return e.at("seed").get<std::uint64_t>();
    return p.base_seed() ^ crc64(path);
  }

  fs::path dir(const char* stage) {
    fs::path d = p.opts_.out_dir / stage;
    fs::create_directories(d);
    return d;
  }

  // ---- config hashes --------------------------------------------------------

  std::string model_hash_cfg(const std::string& name) {
    const json& e = entry(cfg(), "models", name);
    return hash_json({{"stage", "models"}, {"entry", e}, {"seed", seed_of(e, "models/" + name)}});
  }
  std::string corpus_hash(const std::string& name) {
    const json& e = entry(cfg(), "corpora", name);
    return hash_json({{"stage", "corpora"}, {"entry", e}, {"seed", seed_of(e, "corpora/" + name)}});
  }
  std::string synthetic_hash(const std::string& name) {
    const json& e = entry(cfg(), "synthetic", name);
    return hash_json({{"stage", "synthetic"}, {"entry", e}, {"seed", seed_of(e, "synthetic/" + name)}});
  }
  std::string harvest_hash(const std::string& name) {
    const json& e = entry(cfg(), "harvest", name);
    return hash_json({{"stage", "harvest"},
                      {"entry", e},
                      {"seed", seed_of(e, "harvest/" + name)},
                      {"model", model_hash_cfg(e.at("model").get<std::string>())},
                      {"corpus", corpus_hash(e.at("corpus").get<std::string>())}});
  }
  // "<harvest>" or "<synthetic>.a" / "<synthetic>.b"
  std::pair<std::string, std::string> activation_owner(const std::string& ref) {
    if (section(cfg(), "harvest").contains(ref)) return {"harvest", ref};
    const auto dot = ref.rfind('.');
    if (dot != std::string::npos) {
      const std::string base = ref.substr(0, dot), side = ref.substr(dot + 1);
      if (section(cfg(), "synthetic").contains(base) && (side == "a" || side == "b")) return {"synthetic", base};
    }
    throw Error(ErrorKind::config, "config: unknown activation source '" + ref + "'");
  }
  std::string activations_hash(const std::string& ref) {
    const auto [kind, owner] = activation_owner(ref);
    return kind == "harvest" ? harvest_hash(owner) : synthetic_hash(owner);
  }
  std::string sae_hash(const std::string& name) {
    const json& e = entry(cfg(), "saes", name);
    return hash_json({{"stage", "saes"},
                      {"entry", e},
                      {"seed", seed_of(e, "saes/" + name)},
                      {"activations", activations_hash(e.at("activations").get<std::string>())}});
  }
  std::string source_hash(const json& item) {
    if (item.contains("sae")) return sae_hash(item.at("sae").get<std::string>());
    if (item.contains("activations")) return activations_hash(item.at("activations").get<std::string>());
    if (item.contains("codes")) return synthetic_hash(item.at("codes").get<std::string>());
    throw Error(ErrorKind::config, "config: mppc side item needs sae, activations or codes");
  }
  std::string mppc_hash(const std::string& name) {
    const json& e = entry(cfg(), "mppc", name);
    json up = json::array();
    for (const char* side : {"a", "b"})
      if (e.contains(side))
        for (const auto& item : e.at(side)) up.push_back(source_hash(item));
    if (e.contains("model_a")) {
      up.push_back(model_hash_cfg(e.at("model_a").get<std::string>()));
      up.push_back(model_hash_cfg(e.at("model_b").get<std::string>()));
      up.push_back(corpus_hash(e.at("corpus").get<std::string>()));
    }
    if (e.contains("planted")) up.push_back(synthetic_hash(e.at("planted").get<std::string>()));
    return hash_json({{"stage", "mppc"}, {"entry", e}, {"upstream", up}});
  }

  // ---- manifests -----------------------------------------------------------

  fs::path manifest_path(const char* stage, const std::string& name) {
    return p.opts_.out_dir / stage / (name + ".manifest.json");
  }

  json provenance(const std::string& hash, std::uint64_t seed) {
    return {{"config_hash", hash}, {"seed", seed}, {"version", kToolVersion}};
  }

  // True when the stage must run. Same hash with intact outputs skips; a
  // different hash refuses unless forced.
  bool need_build(const char* stage, const std::string& name, const std::string& hash) {
    const fs::path mp = manifest_path(stage, name);
    if (!fs::exists(mp)) return true;
    const json m = read_json(mp);
    if (m.at("config_hash") != hash) {
      UNIV_CHECK(p.opts_.force, contract,
                 std::string(stage) + "/" + name + " exists from a different config (hash " +
                     m.at("config_hash").get<std::string>() + ", expected " + hash +
                     "); refusing to mix artifacts (use --force or a fresh --out-dir)");
      return true;
    }
    for (const auto& [file, crc] : m.at("outputs").items()) {
      const fs::path f = p.opts_.out_dir / stage / file;
      if (!fs::exists(f) || file_crc(f) != crc.get<std::string>()) return true;
    }
    p.log_.push_back({stage, name, StageOutcome::skipped, hash});
    return false;
  }

  void finish(const char* stage, const std::string& name, const std::string& hash, std::uint64_t seed,
              const std::vector<std::string>& outputs) {
    json out = json::object();
    for (const auto& f : outputs) out[f] = file_crc(p.opts_.out_dir / stage / f);
    json m = provenance(hash, seed);
    m["stage"] = stage;
    m["name"] = name;
    m["outputs"] = out;
    write_json(manifest_path(stage, name), m);
    p.log_.push_back({stage, name, StageOutcome::built, hash});
  }

  void require_upstream(const char* stage, const std::string& name, const std::string& hash, const char* cmd) {
    const fs::path mp = manifest_path(stage, name);
    UNIV_CHECK(fs::exists(mp), contract,
               std::string("missing upstream artifact ") + stage + "/" + name + "; run `univlab " + cmd + "` first");
    const json m = read_json(mp);
    UNIV_CHECK(m.at("config_hash") == hash, contract,
               std::string("upstream ") + stage + "/" + name + " was built from a different config; rerun `univlab " +
                   cmd + "`");
  }

  void require_activations(const std::string& ref) {
    const auto [kind, owner] = activation_owner(ref);
    require_upstream("activations", owner, activations_hash(ref), "harvest");
  }

  // ---- loaders -------------------------------------------------------------

  Model load_model(const std::string& name) {
    require_upstream("models", name, model_hash_cfg(name), "build-models");
    return load_weights(p.opts_.out_dir / "models" / (name + ".uwt"));
  }

  std::vector<TokenDocument> load_corpus(const std::string& name) {
    require_upstream("corpora", name, corpus_hash(name), "harvest");
    return read_corpus(p.opts_.out_dir / "corpora" / (name + ".ndjson"));
  }

  ActivationStream load_activations(const std::string& ref) {
    require_activations(ref);
    return read_activation_shard(p.opts_.out_dir / "activations" / (ref + ".shard"));
  }

  FeatureMatrix load_source(const json& item) {
    if (item.contains("sae")) {
      const std::string s = item.at("sae").get<std::string>();
      require_upstream("saes", s, sae_hash(s), "train-sae");
      return load_features(p.opts_.out_dir / "saes" / (s + ".feat"));
    }
    if (item.contains("activations")) return stream_as_features(load_activations(item.at("activations").get<std::string>()));
    const std::string syn = item.at("codes").get<std::string>();
    require_upstream("activations", syn, synthetic_hash(syn), "harvest");
    return load_features(p.opts_.out_dir / "activations" / (syn + ".codes.feat"));
  }

  // ---- stages --------------------------------------------------------------

  void build_models() {
    for (const auto& [name, e] : section(cfg(), "models").items()) {
      if (!selected(name)) continue;
      const std::string hash = model_hash_cfg(name);
      if (!need_build("models", name, hash)) continue;
      const std::uint64_t seed = seed_of(e, "models/" + name);
      const std::string kind = e.at("kind").get<std::string>();
      const std::size_t vocab = get_or<std::size_t>(e, "vocab", 32);
      UNIV_CHECK(vocab >= 8, usage, "models/" + name + ": vocab must be >= 8");
      Model m;
      json probe = json::object();
      if (kind == "induction_mamba") m = build_induction_mamba(vocab, seed);
      else if (kind == "induction_transformer") m = build_induction_transformer(vocab, seed, get_or<std::size_t>(e, "max_len", 80));
      else if (kind == "ioi_mamba") m = build_ioi_mamba(seed);
      else if (kind == "random") {
        RandomModelOptions o;
        const std::string arch = get_or<std::string>(e, "arch", "mamba");
        UNIV_CHECK(arch == "mamba" || arch == "transformer", config, "models/" + name + ": arch must be mamba or transformer");
        o.arch = arch == "mamba" ? Architecture::mamba : Architecture::transformer;
        o.n_layers = get_or<std::size_t>(e, "n_layers", o.n_layers);
        o.d_model = get_or<std::size_t>(e, "d_model", o.d_model);
        o.vocab = vocab;
        o.max_len = get_or<std::size_t>(e, "max_len", o.max_len);
        o.d_state = get_or<std::size_t>(e, "d_state", o.d_state);
        o.n_heads = get_or<std::size_t>(e, "n_heads", o.n_heads);
        o.d_mlp = get_or<std::size_t>(e, "d_mlp", o.d_mlp);
        m = build_random_model(o, seed);
      } else {
        throw Error(ErrorKind::config, "models/" + name + ": unknown kind '" + kind + "'");
      }
      if (kind == "induction_mamba" || kind == "induction_transformer") {
        const std::size_t ds[] = {8, 16, 32};
        const ProbeReport r = probe_induction(m, ds, get_or<std::size_t>(e, "probes", 200), seed + 1);
        for (const auto& [d, acc] : r.accuracy_by_distance) {
          probe[std::to_string(d)] = acc;
          UNIV_CHECK(acc >= 0.99, contract,
                     "models/" + name + ": probe accuracy " + std::to_string(acc) + " at distance " + std::to_string(d));
        }
      }
      const fs::path d = dir("models");
      save_weights(m, d / (name + ".uwt"));
      json info = {{"kind", kind}, {"model_hash", model_hash(m)}, {"tags", m.tags}, {"probe_accuracy", probe},
                   {"provenance", provenance(hash, seed)}};
      write_json(d / (name + ".json"), info);
      finish("models", name, hash, seed, {name + ".uwt", name + ".json"});
    }
  }

  void harvest() {
    for (const auto& [name, e] : section(cfg(), "corpora").items()) {
      if (!selected(name)) continue;
      const std::string hash = corpus_hash(name);
      if (!need_build("corpora", name, hash)) continue;
      CorpusParams cp;
      cp.kind = parse_corpus_kind(get_or<std::string>(e, "kind", "uniform"));
      cp.docs = get_or<std::size_t>(e, "docs", cp.docs);
      cp.vocab = get_or<std::size_t>(e, "vocab", cp.vocab);
      cp.length = get_or<std::size_t>(e, "length", cp.length);
      cp.distance = get_or<std::size_t>(e, "distance", cp.distance);
      cp.corruption = parse_corruption(get_or<std::string>(e, "corruption", "none"));
      cp.seed = seed_of(e, "corpora/" + name);
      const TaskCorpus c = gen_token_corpus(cp);
      const fs::path d = dir("corpora");
      std::vector<std::string> outs = {name + ".ndjson"};
      write_corpus(c.clean, d / outs[0]);
      if (!c.corrupted.empty()) {
        outs.push_back(name + ".corrupted.ndjson");
        write_corpus(c.corrupted, d / outs[1]);
      }
      finish("corpora", name, hash, cp.seed, outs);
    }

    for (const auto& [name, e] : section(cfg(), "synthetic").items()) {
      if (!selected(name)) continue;
      const std::string hash = synthetic_hash(name);
      if (!need_build("activations", name, hash)) continue;
      const std::uint64_t seed = seed_of(e, "synthetic/" + name);
      const std::size_t dd = get_or<std::size_t>(e, "d", 64), ft = get_or<std::size_t>(e, "f_true", 256);
      SyntheticFeatureModel ga = make_synthetic_model(dd, ft, get_or<std::uint64_t>(e, "dict_seed_a", seed + 1));
      ga.active_per_sample = get_or<double>(e, "active", ga.active_per_sample);
      ga.magnitude_lo = get_or<double>(e, "magnitude_lo", ga.magnitude_lo);
      ga.magnitude_hi = get_or<double>(e, "magnitude_hi", ga.magnitude_hi);
      SyntheticFeatureModel gb = get_or<bool>(e, "rotated", false)
                                     ? rotate_synthetic_model(ga, get_or<std::uint64_t>(e, "rotation_seed", seed + 4))
                                     : make_synthetic_model(dd, ft, get_or<std::uint64_t>(e, "dict_seed_b", seed + 2));
      gb.active_per_sample = ga.active_per_sample;
      gb.magnitude_lo = ga.magnitude_lo;
      gb.magnitude_hi = ga.magnitude_hi;
      const SparseCodes codes =
          gen_sparse_codes(ga, get_or<std::size_t>(e, "samples", 200000), get_or<std::uint64_t>(e, "code_seed", seed + 3));
      const SyntheticPair pair = gen_synthetic_pair(ga, gb, codes);
      const fs::path d = dir("activations");
      write_activation_shard(pair.a, d / (name + ".a.shard"), seed);
      write_activation_shard(pair.b, d / (name + ".b.shard"), seed);
      save_features(codes_as_features(codes, pair.a.rows), d / (name + ".codes.feat"));
      finish("activations", name, hash, seed,
             {name + ".a.shard", name + ".a.shard.json", name + ".b.shard", name + ".b.shard.json", name + ".codes.feat"});
    }

    for (const auto& [name, e] : section(cfg(), "harvest").items()) {
      if (!selected(name)) continue;
      const std::string hash = harvest_hash(name);
      if (!need_build("activations", name, hash)) continue;
      const std::uint64_t seed = seed_of(e, "harvest/" + name);
      const Model m = load_model(e.at("model").get<std::string>());
      const auto corpus = load_corpus(e.at("corpus").get<std::string>());
      const HookSite site = parse_hook_site(e.at("site").get<std::string>());
      std::optional<TokenId> eos;
      if (e.contains("eos")) eos = e.at("eos").get<TokenId>();
      ActivationStream s;
      if (get_or<bool>(e, "aligned", false)) {
        s = collect_aligned(m, corpus, site, eos);
      } else {
        HarvestOptions ho;
        ho.buffer_capacity = get_or<std::size_t>(e, "buffer", ho.buffer_capacity);
        ho.seed = seed;
        ho.eos_id = eos;
        s = collect_activations(m, corpus, site, ho);
      }
      write_activation_shard(s, dir("activations") / (name + ".shard"), seed);
      finish("activations", name, hash, seed, {name + ".shard", name + ".shard.json"});
    }
  }

  void train_saes() {
    for (const auto& [name, e] : section(cfg(), "saes").items()) {
      if (!selected(name)) continue;
      const std::string hash = sae_hash(name);
      if (!need_build("saes", name, hash)) continue;
      const std::uint64_t seed = seed_of(e, "saes/" + name);
      json tj = get_or<json>(e, "train", json::object());
      if (!tj.contains("seed")) tj["seed"] = seed;
      const SaeTrainConfig tc = SaeTrainConfig::from_json(tj);
      const ActivationStream s = load_activations(e.at("activations").get<std::string>());
      const SaeTrainResult r = train_sae(s, tc);
      const fs::path d = dir("saes");
      save_sae(r.params, d / (name + ".sae"),
               {{"step", r.steps}, {"train_config_hash", tc.hash()}, {"provenance", provenance(hash, tc.seed)}});
      write_metrics_csv(r.timeline, d / (name + ".metrics.csv"));
      json summary = {{"steps", r.steps},
                      {"samples_seen", r.samples_seen},
                      {"dead_features", r.dead_features},
                      {"stream_exhausted", r.stream_exhausted},
                      {"warnings", r.warnings},
                      {"train_config", tc.to_json()},
                      {"provenance", provenance(hash, tc.seed)}};
      if (!r.timeline.empty())
        summary["final"] = {{"mse", r.timeline.back().mse}, {"l0", r.timeline.back().l0}, {"l1", r.timeline.back().l1}};
      write_json(d / (name + ".summary.json"), summary);
      save_features(encode_stream(r.params, s), d / (name + ".feat"));
      finish("saes", name, hash, tc.seed,
             {name + ".sae", name + ".metrics.csv", name + ".summary.json", name + ".feat"});
    }
  }

  void mppc() {
    for (const auto& [name, e] : section(cfg(), "mppc").items()) {
      if (!selected(name)) continue;
      const std::string hash = mppc_hash(name);
      if (!need_build("mppc", name, hash)) continue;
      CorrelationJobSpec spec;
      const std::string mode = get_or<std::string>(e, "mode", "sae");
      UNIV_CHECK(mode == "sae" || mode == "neuron", config, "mppc/" + name + ": mode must be sae or neuron");
      if (e.contains("model_a")) {
        UNIV_CHECK(mode == "neuron", config, "mppc/" + name + ": model_a/model_b jobs are neuron mode");
        const auto corpus = load_corpus(e.at("corpus").get<std::string>());
        spec = neuron_mode_sources(load_model(e.at("model_a").get<std::string>()),
                                   load_model(e.at("model_b").get<std::string>()), corpus);
      } else {
        for (const char* side : {"a", "b"}) {
          UNIV_CHECK(e.contains(side) && e.at(side).is_array() && !e.at(side).empty(), config,
                     "mppc/" + name + ": side '" + side + "' must be a non-empty list");
          for (const auto& item : e.at(side))
            (side[0] == 'a' ? spec.a : spec.b).push_back({get_or<int>(item, "layer", 0), load_source(item)});
        }
        spec.mode = mode == "sae" ? MppcMode::sae : MppcMode::neuron;
      }
      spec.direction = get_or<std::string>(e, "direction", spec.direction);
      spec.same_layer_only = get_or<bool>(e, "same_layer_only", false);
      spec.memory_budget = get_or<std::size_t>(e, "memory_budget_mb", 1024) << 20;
      if (get_or<bool>(e, "reverse", false)) spec = reverse(spec);
      const MatchTable t = run_mppc(spec);

      const fs::path d = dir("mppc");
      write_match_csv(t, d / (name + ".csv"));
      save_match_summary(t, d / (name + ".summary"));
      json info = {{"summary", t.summary()}, {"provenance", provenance(hash, p.base_seed())}};
      if (e.contains("planted")) {
        UNIV_CHECK(spec.a.size() == 1, config, "mppc/" + name + ": planted evaluation needs a single side-A source");
        const std::string syn = e.at("planted").get<std::string>();
        json codes_item = {{"codes", syn}};
        info["planted"] = planted_recovery(load_source(codes_item), spec.a[0].features, t).to_json();
      }
      write_json(d / (name + ".json"), info);
      finish("mppc", name, hash, p.base_seed(), {name + ".csv", name + ".summary", name + ".json"});
    }
  }

  void patch(const PatchCommand& cmd) {
    const json& s = section(cfg(), "patch");
    UNIV_CHECK(!s.empty(), config, "config has no patch section");
    const std::uint64_t seed = seed_of(s, "patch");
    const FreezePolicy policy = cmd.policy.value_or(parse_freeze_policy(get_or<std::string>(s, "policy", "other-states")));
    const std::size_t n = get_or<std::size_t>(s, "tasks", 128);
    const auto distances = get_or<std::vector<std::size_t>>(s, "distances", {8, 16, 32});

    std::string stem;
    std::string model_name;
    if (cmd.sweep == "sweep-states") stem = "states";
    else if (cmd.sweep == "sweep-ssm") stem = "ssm";
    else if (cmd.sweep == "sweep-conv") stem = std::string("conv-") + to_string(cmd.corruption.value_or(Corruption::b_corrupt));
    else if (cmd.sweep == "ioi") stem = "ioi";
    else throw Error(ErrorKind::usage, "unknown patch sweep '" + cmd.sweep + "'");
    if (policy != FreezePolicy::other_states) stem += std::string(".") + to_string(policy);
    model_name = s.at(cmd.sweep == "ioi" ? "ioi_model" : "model").get<std::string>();

    const std::string hash = hash_json({{"stage", "patch"},
                                        {"entry", s},
                                        {"sweep", stem},
                                        {"seed", seed},
                                        {"policy", to_string(policy)},
                                        {"model", model_hash_cfg(model_name)}});
    if (!need_build("patch", stem, hash)) return;
    const Model m = load_model(model_name);
    auto layer_of = [&](const char* tag) {
      if (s.contains("layer")) return s.at("layer").get<int>();
      UNIV_CHECK(m.tags.count(tag), config, "patch: model '" + model_name + "' has no " + tag + " tag; set patch.layer");
      return std::stoi(m.tags.at(tag));
    };

    SweepResult r;
    json verdicts = json::array();
    if (cmd.sweep == "ioi") {
      r = ioi_sweep(m, make_ioi_suite(get_or<std::size_t>(s, "ioi_tasks", n), Corruption::ioi_names, seed), policy);
      const std::string labels[] = {"IO", "S1", "S2"};
      for (const auto& v : off_by_one_detect(r, labels))
        verdicts.push_back({{"source", v.source}, {"same", v.same}, {"next", v.next}, {"verdict", to_string(v.verdict)}});
    } else {
      const auto tasks = make_induction_suite(m.config.vocab, distances, n, Corruption::b_corrupt, seed, m.config.bos_id);
      if (cmd.sweep == "sweep-states") {
        std::vector<int> layers = get_or<std::vector<int>>(s, "layers", {});
        if (layers.empty())
          for (int l = 0; l < static_cast<int>(m.config.n_layers); ++l) layers.push_back(l);
        r = sweep_states(m, tasks, layers, policy);
      } else if (cmd.sweep == "sweep-ssm") {
        r = sweep_ssm_inputs(m, tasks, layer_of("designated_layer"), policy);
        const std::string labels[] = {"B1"};
        for (const auto& v : off_by_one_detect(r, labels))
          verdicts.push_back({{"source", v.source}, {"same", v.same}, {"next", v.next}, {"verdict", to_string(v.verdict)}});
      } else {
        r = sweep_conv_inputs(m, tasks, layer_of("designated_layer"), cmd.corruption.value_or(Corruption::b_corrupt),
                              policy, seed + 1);
      }
    }
    const fs::path d = dir("patch");
    write_sweep(r, d / (stem + ".csv"));
    json meta = r.metadata();
    meta["provenance"] = provenance(hash, seed);
    if (!verdicts.empty()) meta["off_by_one"] = verdicts;
    write_json(d / (stem + ".csv.json"), meta);
    finish("patch", stem, hash, seed, {stem + ".csv", stem + ".csv.json"});
  }

  void autointerp() {
    const json& s = section(cfg(), "autointerp");
    UNIV_CHECK(!s.empty(), config, "config has no autointerp section");
    const std::string sae = s.at("sae").get<std::string>();
    const json& se = entry(cfg(), "saes", sae);
    const std::string act = se.at("activations").get<std::string>();
    UNIV_CHECK(activation_owner(act).first == "harvest", config,
               "autointerp: SAE '" + sae + "' was trained on synthetic data; evidence needs token documents");
    const std::string corpus_name = entry(cfg(), "harvest", act).at("corpus").get<std::string>();
    const ChatClientConfig client = ChatClientConfig::from_json(get_or<json>(s, "client", json::object()));
    const std::size_t count = get_or<std::size_t>(s, "count", 16);
    const auto kinds = get_or<std::vector<std::string>>(s, "kinds", {"complexity", "consistency"});
    const int layer = get_or<int>(s, "layer", 0);

    require_upstream("saes", sae, sae_hash(sae), "train-sae");
    const FeatureMatrix fm = load_features(p.opts_.out_dir / "saes" / (sae + ".feat"));
    const auto corpus = load_corpus(corpus_name);
    const bool ioi_words = get_or<std::string>(entry(cfg(), "corpora", corpus_name), "kind", "uniform") == "ioi";
    const TokenText text = [ioi_words](TokenId t) -> std::string {
      if (ioi_words && t < IoiVocab::get().size()) return IoiVocab::get().words[t];
      return t == 0 ? "<bos>" : "tok" + std::to_string(t);
    };

    std::vector<std::size_t> fires(fm.n_features, 0);
    for (std::uint32_t idx : fm.index) ++fires[idx];
    std::vector<FeatureEvidence> evidence;
    for (std::size_t f = 0; f < fm.n_features && evidence.size() < count; ++f)
      if (fires[f] > 0) evidence.push_back(top_activating_samples(f, fm, corpus, text, layer));

    const fs::path d = dir("autointerp");
    ScoreCache cache(d / "cache.jsonl");
    for (const auto& k : kinds) {
      const ScoreKind kind = parse_score_kind(k);
      json client_cfg = client.to_json();
      const std::string hash = hash_json({{"stage", "autointerp"}, {"entry", s}, {"kind", k}, {"sae", sae_hash(sae)}});
      if (!need_build("autointerp", k, hash)) continue;
      const auto recs = score_features(client, &cache, evidence, kind);
      std::string lines;
      for (const auto& r : recs) lines += r.to_json().dump() + "\n";
      write_text(d / (k + ".jsonl"), lines);
      finish("autointerp", k, hash, p.base_seed(), {k + ".jsonl"});
    }
  }

  void report() {
    const json& s = section(cfg(), "report");
    std::vector<std::string> jobs = get_or<std::vector<std::string>>(s, "jobs", {});
    if (jobs.empty())
      for (const auto& [name, e] : section(cfg(), "mppc").items()) jobs.push_back(name);
    const std::size_t bins = get_or<std::size_t>(s, "bins", 20);
    UNIV_CHECK(bins > 0, config, "report: bins must be positive");

    // Inputs are hashed by content so a rebuilt upstream invalidates the report.
    json inputs = json::object();
    auto note_input = [&](const fs::path& f) { inputs[fs::relative(f, p.opts_.out_dir).generic_string()] = file_crc(f); };
    for (const auto& j : jobs) {
      require_upstream("mppc", j, mppc_hash(j), "mppc");
      note_input(p.opts_.out_dir / "mppc" / (j + ".csv"));
    }
    std::vector<fs::path> extras;
    for (const char* sub : {"patch", "autointerp"}) {
      const fs::path d = p.opts_.out_dir / sub;
      if (!fs::exists(d)) continue;
      for (const auto& f : fs::directory_iterator(d)) {
        const std::string fn = f.path().filename().string();
        const bool wanted = (std::string(sub) == "patch" && f.path().extension() == ".csv") ||
                            fn == "complexity.jsonl" || fn == "consistency.jsonl";
        if (wanted) extras.push_back(f.path());
      }
    }
    std::sort(extras.begin(), extras.end());
    for (const auto& f : extras) note_input(f);
    const std::string hash = hash_json({{"stage", "report"}, {"entry", s}, {"jobs", jobs}, {"inputs", inputs}});
    if (!need_build("reports", "report", hash)) return;

    const fs::path d = dir("reports");
    std::vector<std::string> outs;
    json index = {{"provenance", provenance(hash, p.base_seed())}, {"mppc", json::object()}};
    std::map<std::string, MatchTable> tables;
    for (const auto& j : jobs) {
      const MatchTable t = read_match_csv(p.opts_.out_dir / "mppc" / (j + ".csv"));
      const json summary = read_json(p.opts_.out_dir / "mppc" / (j + ".json")).at("summary");
      tables[j] = t;
      std::vector<std::size_t> hist(bins, 0);
      int max_la = 0, max_lb = 0;
      for (const auto& e : t.entries) {
        max_la = std::max(max_la, e.layer_a);
        if (!e.defined) continue;
        max_lb = std::max(max_lb, e.layer_b);
        const double x = std::clamp((e.rho + 1.0) / 2.0 * double(bins), 0.0, double(bins - 1));
        ++hist[static_cast<std::size_t>(x)];
      }
      std::ostringstream csv;
      csv.precision(17);
      csv << "bin_lo,bin_hi,count\n";
      json hj = json::array();
      for (std::size_t b = 0; b < bins; ++b) {
        const double lo = -1.0 + 2.0 * double(b) / double(bins), hi = -1.0 + 2.0 * double(b + 1) / double(bins);
        csv << lo << ',' << hi << ',' << hist[b] << '\n';
        hj.push_back({{"lo", lo}, {"hi", hi}, {"count", hist[b]}});
      }
      write_text(d / (j + ".hist.csv"), csv.str());
      const Matrix depth = depth_histogram(t, std::size_t(max_la) + 1, std::size_t(max_lb) + 1);
      std::ostringstream dc;
      dc << "layer_a";
      for (std::size_t lb = 0; lb < depth.cols(); ++lb) dc << ",layer_b" << lb;
      dc << '\n';
      for (std::size_t la = 0; la < depth.rows(); ++la) {
        dc << la;
        for (std::size_t lb = 0; lb < depth.cols(); ++lb) dc << ',' << depth(la, lb);
        dc << '\n';
      }
      write_text(d / (j + ".depth.csv"), dc.str());
      json jj = {{"summary", summary}, {"histogram", hj}, {"undefined", t.undefined_count()},
                 {"provenance", provenance(hash, p.base_seed())}};
      write_json(d / (j + ".hist.json"), jj);
      outs.insert(outs.end(), {j + ".hist.csv", j + ".depth.csv", j + ".hist.json"});
      index["mppc"][j] = summary;
    }

    for (const auto& pair : get_or<json>(s, "difference", json::array())) {
      const std::string a = pair.at("main").get<std::string>(), b = pair.at("skyline").get<std::string>();
      UNIV_CHECK(tables.count(a) && tables.count(b), config, "report: difference names a job not in report.jobs");
      json dj = mppc_difference(tables.at(a), tables.at(b)).to_json();
      dj["provenance"] = provenance(hash, p.base_seed());
      const std::string f = "diff_" + a + "_vs_" + b + ".json";
      write_json(d / f, dj);
      outs.push_back(f);
    }

    const std::string scores_job = get_or<std::string>(s, "scores_job", jobs.empty() ? "" : jobs.front());
    for (const auto& f : extras) {
      if (f.extension() != ".jsonl") continue;
      std::vector<ScoreRecord> recs;
      std::istringstream in(read_file(f));
      for (std::string line; std::getline(in, line);)
        if (!line.empty()) recs.push_back(ScoreRecord::from_json(json::parse(line)));
      UNIV_CHECK(tables.count(scores_job), config, "report: scores_job '" + scores_job + "' not among report jobs");
      const ScoreReport sr = score_vs_mppc_report(recs, tables.at(scores_job));
      const std::string stem = "scores_" + f.stem().string();
      write_text(d / (stem + ".csv"), sr.to_csv());
      json sj = sr.to_json();
      sj["provenance"] = provenance(hash, p.base_seed());
      write_json(d / (stem + ".json"), sj);
      outs.insert(outs.end(), {stem + ".csv", stem + ".json"});
    }
    json grids = json::array();
    for (const auto& f : extras)
      if (f.extension() == ".csv") grids.push_back(fs::relative(f, p.opts_.out_dir).generic_string());
    index["patch_grids"] = grids;
    index["outputs"] = outs;
    write_json(d / "index.json", index);
    outs.push_back("index.json");
    finish("reports", "report", hash, p.base_seed(), outs);
  }
};

Pipeline::Pipeline(json config, RunOptions options) : cfg_(std::move(config)), opts_(std::move(options)) {
  UNIV_CHECK(cfg_.is_object(), config, "config must be a JSON object");
  for (const auto& [k, v] : cfg_.items()) {
    UNIV_CHECK(kSections.count(k), config, "config: unknown section '" + k + "'");
    if (k != "seed") UNIV_CHECK(v.is_object(), config, "config: section '" + k + "' must be an object");
  }
  UNIV_CHECK(cfg_.contains("seed") || opts_.seed, config, "config: a base seed is required (\"seed\" or --seed)");
  if (opts_.threads > 0) set_num_threads(opts_.threads);
}

Pipeline Pipeline::from_file(const fs::path& config, RunOptions options) {
  UNIV_CHECK(fs::exists(config), usage, "config file not found: " + config.string());
  json j;
  try {
    j = json::parse(read_file(config));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, config.string() + ": " + e.what());
  }
  return Pipeline(std::move(j), std::move(options));
}

std::uint64_t Pipeline::base_seed() const {
  return opts_.seed ? *opts_.seed : cfg_.at("seed").get<std::uint64_t>();
}

std::string Pipeline::config_hash() const { return hash_json({{"config", cfg_}, {"seed", base_seed()}}); }

void Pipeline::build_models() { Impl{*this}.build_models(); }
void Pipeline::harvest() { Impl{*this}.harvest(); }
void Pipeline::train_saes() { Impl{*this}.train_saes(); }
void Pipeline::mppc() { Impl{*this}.mppc(); }
void Pipeline::patch(const PatchCommand& cmd) { Impl{*this}.patch(cmd); }
void Pipeline::autointerp() { Impl{*this}.autointerp(); }
void Pipeline::report() { Impl{*this}.report(); }

// ---- synthetic benchmark ------------------------------------------------------

json synth_bench(const SynthBenchOptions& o) {
  using clock = std::chrono::steady_clock;
  auto secs = [](clock::time_point a) { return std::chrono::duration<double>(clock::now() - a).count(); };
  json out = {{"d", o.d},          {"f_true", o.f_true}, {"f", o.f},         {"samples", o.samples},
              {"rotated", o.rotated}, {"seed", o.seed},  {"epochs", o.epochs}, {"batch", o.batch},
              {"lambda_l1", o.lambda_l1}, {"lr", o.lr},  {"simd", simd::to_string(simd::active().isa)},
              {"threads", num_threads()}};

  auto t0 = clock::now();
  const SyntheticFeatureModel ga = make_synthetic_model(o.d, o.f_true, o.seed);
  const SyntheticFeatureModel gb = o.rotated ? rotate_synthetic_model(ga, o.seed + 8) : make_synthetic_model(o.d, o.f_true, o.seed + 1);
  const SparseCodes codes = gen_sparse_codes(ga, o.samples, o.seed + 2);
  const SyntheticPair pair = gen_synthetic_pair(ga, gb, codes);
  out["time_generate_s"] = secs(t0);

  SaeTrainConfig tc;
  tc.f = o.f;
  tc.lambda_l1 = o.lambda_l1;
  tc.adam.lr = o.lr;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.renormalize_decoder = true;
  tc.seed = o.seed;
  t0 = clock::now();
  const SaeTrainResult ra = train_sae(pair.a, tc);
  tc.seed = o.seed + 1;
  const SaeTrainResult rb = train_sae(pair.b, tc);
  out["time_train_s"] = secs(t0);
  out["l0"] = {ra.timeline.back().l0, rb.timeline.back().l0};

  t0 = clock::now();
  CorrelationJobSpec spec;
  spec.a.push_back({0, encode_stream(ra.params, pair.a)});
  spec.b.push_back({0, encode_stream(rb.params, pair.b)});
  const MatchTable t = run_mppc(spec);
  out["time_mppc_s"] = secs(t0);
  out["sae"] = t.summary();
  out["planted"] = planted_recovery(codes_as_features(codes, pair.a.rows), spec.a[0].features, t).to_json();

  if (o.neuron_baseline) {
    t0 = clock::now();
    CorrelationJobSpec ns;
    ns.mode = MppcMode::neuron;
    ns.a.push_back({0, stream_as_features(pair.a)});
    ns.b.push_back({0, stream_as_features(pair.b)});
    const MatchTable nt = run_mppc(ns);
    out["time_neuron_mppc_s"] = secs(t0);
    out["neuron"] = nt.summary();
  }
  return out;
}

}  // namespace univlab
