#include <string>

#include "univlab/error.hpp"
#include "univlab/models.hpp"
#include "univlab/tensor_io.hpp"

namespace univlab {

namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;

void put(TensorFile& f, const std::string& name, const Matrix& m) {
  f.tensors.push_back({name, {m.rows(), m.cols()}, m.data()});
}

void put(TensorFile& f, const std::string& name, const Vector& v) { f.tensors.push_back({name, {v.size()}, v}); }

Matrix get_matrix(const TensorFile& f, const std::string& name) {
  const auto& t = f.get(name);
  UNIV_CHECK(t.shape.size() == 2, shape, "weights: '" + name + "' is not a matrix");
  return Matrix(t.shape[0], t.shape[1], t.data);
}

Vector get_vector(const TensorFile& f, const std::string& name) {
  const auto& t = f.get(name);
  UNIV_CHECK(t.shape.size() == 1, shape, "weights: '" + name + "' is not a vector");
  return t.data;
}

json norm_meta(const RmsNorm& n) { return {{"enabled", n.enabled}, {"eps", n.eps}}; }

void put_norm(TensorFile& f, const std::string& prefix, const RmsNorm& n) {
  if (!n.enabled) return;
  put(f, prefix + ".scale", n.scale);
  put(f, prefix + ".shift", n.shift);
}

RmsNorm get_norm(const TensorFile& f, const std::string& prefix, const json& meta) {
  RmsNorm n;
  n.enabled = meta.at("enabled").get<bool>();
  n.eps = meta.at("eps").get<double>();
  if (n.enabled) {
    n.scale = get_vector(f, prefix + ".scale");
    n.shift = get_vector(f, prefix + ".shift");
  }
  return n;
}

TensorFile to_tensor_file(const Model& m) {
  const auto& c = m.config;
  TensorFile f;
  f.meta = {{"format", "univlab-weights"},
            {"version", kFormatVersion},
            {"arch", to_string(c.arch)},
            {"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"vocab", c.vocab},
            {"max_len", c.max_len},
            {"d_state", c.d_state},
            {"d_conv", c.d_conv},
            {"expand", c.expand},
            {"n_heads", c.n_heads},
            {"d_mlp", c.d_mlp},
            {"bos_id", c.bos_id},
            {"tags", m.tags},
            {"final_norm", norm_meta(m.final_norm)}};
  put(f, "embed", m.embed);
  if (!m.pos_embed.empty()) put(f, "pos_embed", m.pos_embed);
  put(f, "unembed", m.unembed);
  put_norm(f, "final_norm", m.final_norm);
  json blocks = json::array();
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l);
    if (const auto* b = std::get_if<MambaBlockParams>(&m.blocks[l])) {
      blocks.push_back({{"norm", norm_meta(b->norm)}});
      put_norm(f, p + ".norm", b->norm);
      put(f, p + ".w_in", b->w_in);
      put(f, p + ".w_gate", b->w_gate);
      put(f, p + ".w_out", b->w_out);
      put(f, p + ".conv_kernel", b->conv_kernel);
      put(f, p + ".conv_bias", b->conv_bias);
      put(f, p + ".ssm.a", b->ssm.a);
      put(f, p + ".ssm.w_delta", b->ssm.w_delta);
      put(f, p + ".ssm.b_delta", b->ssm.b_delta);
      put(f, p + ".ssm.w_b", b->ssm.w_b);
      put(f, p + ".ssm.w_c", b->ssm.w_c);
      put(f, p + ".ssm.w_skip", b->ssm.w_skip);
    } else {
      const auto& t = std::get<TransformerBlockParams>(m.blocks[l]);
      blocks.push_back({{"norm_attn", norm_meta(t.norm_attn)},
                        {"norm_mlp", norm_meta(t.norm_mlp)},
                        {"attn_scale", t.attn_scale},
                        {"d_head", t.d_head}});
      put_norm(f, p + ".norm_attn", t.norm_attn);
      put_norm(f, p + ".norm_mlp", t.norm_mlp);
      for (std::size_t h = 0; h < t.n_heads; ++h) {
        const std::string hp = p + ".head" + std::to_string(h);
        put(f, hp + ".w_q", t.w_q[h]);
        put(f, hp + ".w_k", t.w_k[h]);
        put(f, hp + ".w_v", t.w_v[h]);
        put(f, hp + ".w_o", t.w_o[h]);
      }
      put(f, p + ".w_up", t.w_up);
      put(f, p + ".b_up", t.b_up);
      put(f, p + ".w_down", t.w_down);
      put(f, p + ".b_down", t.b_down);
    }
  }
  f.meta["blocks"] = blocks;
  return f;
}

Model from_tensor_file(const TensorFile& f) {
  const json& meta = f.meta;
  UNIV_CHECK(meta.value("format", "") == "univlab-weights", io, "not a weight file");
  UNIV_CHECK(meta.at("version").get<int>() == kFormatVersion, io, "unsupported weight file version");
  Model m;
  auto& c = m.config;
  const std::string arch = meta.at("arch").get<std::string>();
  UNIV_CHECK(arch == "mamba" || arch == "transformer", architecture, "unknown architecture tag '" + arch + "'");
  c.arch = arch == "mamba" ? Architecture::mamba : Architecture::transformer;
  c.n_layers = meta.at("n_layers");
  c.d_model = meta.at("d_model");
  c.vocab = meta.at("vocab");
  c.max_len = meta.at("max_len");
  c.d_state = meta.at("d_state");
  c.d_conv = meta.at("d_conv");
  c.expand = meta.at("expand");
  c.n_heads = meta.at("n_heads");
  c.d_mlp = meta.at("d_mlp");
  c.bos_id = meta.at("bos_id");
  m.tags = meta.at("tags").get<std::map<std::string, std::string>>();
  m.embed = get_matrix(f, "embed");
  if (f.has("pos_embed")) m.pos_embed = get_matrix(f, "pos_embed");
  m.unembed = get_matrix(f, "unembed");
  m.final_norm = get_norm(f, "final_norm", meta.at("final_norm"));
  const json& blocks = meta.at("blocks");
  UNIV_CHECK(blocks.size() == c.n_layers, shape, "weights: block metadata count != n_layers");
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l);
    const json& bm = blocks[l];
    if (c.arch == Architecture::mamba) {
      MambaBlockParams b;
      b.d_model = c.d_model;
      b.d_inner = c.expand * c.d_model;
      b.d_state = c.d_state;
      b.d_conv = c.d_conv;
      b.norm = get_norm(f, p + ".norm", bm.at("norm"));
      b.w_in = get_matrix(f, p + ".w_in");
      b.w_gate = get_matrix(f, p + ".w_gate");
      b.w_out = get_matrix(f, p + ".w_out");
      b.conv_kernel = get_matrix(f, p + ".conv_kernel");
      b.conv_bias = get_vector(f, p + ".conv_bias");
      b.ssm.a = get_matrix(f, p + ".ssm.a");
      b.ssm.w_delta = get_matrix(f, p + ".ssm.w_delta");
      b.ssm.b_delta = get_vector(f, p + ".ssm.b_delta");
      b.ssm.w_b = get_matrix(f, p + ".ssm.w_b");
      b.ssm.w_c = get_matrix(f, p + ".ssm.w_c");
      b.ssm.w_skip = get_vector(f, p + ".ssm.w_skip");
      m.blocks.emplace_back(std::move(b));
    } else {
      TransformerBlockParams t;
      t.d_model = c.d_model;
      t.n_heads = c.n_heads;
      t.d_head = bm.at("d_head");
      t.d_mlp = c.d_mlp;
      t.attn_scale = bm.at("attn_scale");
      t.norm_attn = get_norm(f, p + ".norm_attn", bm.at("norm_attn"));
      t.norm_mlp = get_norm(f, p + ".norm_mlp", bm.at("norm_mlp"));
      for (std::size_t h = 0; h < t.n_heads; ++h) {
        const std::string hp = p + ".head" + std::to_string(h);
        t.w_q.push_back(get_matrix(f, hp + ".w_q"));
        t.w_k.push_back(get_matrix(f, hp + ".w_k"));
        t.w_v.push_back(get_matrix(f, hp + ".w_v"));
        t.w_o.push_back(get_matrix(f, hp + ".w_o"));
      }
      t.w_up = get_matrix(f, p + ".w_up");
      t.b_up = get_vector(f, p + ".b_up");
      t.w_down = get_matrix(f, p + ".w_down");
      t.b_down = get_vector(f, p + ".b_down");
      m.blocks.emplace_back(std::move(t));
    }
  }
  m.validate();
  return m;
}

}  // namespace

void save_weights(const Model& model, const std::filesystem::path& path) {
  model.validate();
  save_tensor_file(to_tensor_file(model), path);
}

Model load_weights(const std::filesystem::path& path) {
  try {
    return from_tensor_file(load_tensor_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::shape, "weights " + path.string() + ": malformed header: " + e.what());
  }
}

Model load_weights(const std::filesystem::path& path, Architecture expected) {
  Model m = load_weights(path);
  UNIV_CHECK(m.config.arch == expected, architecture,
             "weights " + path.string() + " hold a " + to_string(m.config.arch) + " model, expected " +
                 to_string(expected));
  return m;
}

std::string model_hash(const Model& model) { return crc64_hex(encode_tensor_file(to_tensor_file(model))); }

}  // namespace univlab
