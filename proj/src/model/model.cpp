#include "iclgd/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <stdexcept>

#include <openssl/evp.h>

#include "iclgd/errors.hpp"

namespace iclgd {

namespace {

void require_square(const Matrix& m, std::size_t dim, const char* name) {
  if (m.rows() != dim || m.cols() != dim) {
    throw DimensionError(std::string(name) + ": expected " + std::to_string(dim) + "x" +
                         std::to_string(dim) + ", got " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
  }
}

// Linear attention term a_j = W_V H_s (W_K H_s)ᵀ W_Q h_j for all tokens,
// evaluated score-first: S = (W_K H_s)ᵀ (W_Q H), then (W_V H_s) S.
Matrix linear_attention_term(const TokenStates& h, const LayerWeights& w) {
  w.validate(h.dim());
  const Matrix hs = h.demos();
  const Matrix keys = w.w_k * hs;
  const Matrix values = w.w_v * hs;
  const Matrix queries = w.w_q * h.h;
  const Matrix scores = keys.transpose() * queries;
  return values * scores;
}

}  // namespace

PromptSequence::PromptSequence(std::vector<Token> demos, Vector query_x, std::size_t d_out)
    : demos_(std::move(demos)), query_{std::move(query_x), Vector(d_out, 0.0)} {
  for (const Token& t : demos_) {
    if (t.x.size() != query_.x.size() || t.y.size() != d_out) {
      throw DimensionError("PromptSequence: demonstration token dimensions differ from query");
    }
  }
}

TokenStates to_states(const PromptSequence& p) {
  const std::size_t dim = p.token_dim();
  const std::size_t d_in = p.d_in();
  TokenStates s{Matrix(dim, p.num_demos() + 1), p.num_demos()};
  auto put = [&](std::size_t j, const Token& t) {
    for (std::size_t i = 0; i < d_in; ++i) s.h(i, j) = t.x[i];
    for (std::size_t i = 0; i < t.y.size(); ++i) s.h(d_in + i, j) = t.y[i];
  };
  for (std::size_t j = 0; j < p.num_demos(); ++j) put(j, p.demos()[j]);
  put(p.num_demos(), p.query());
  return s;
}

void LayerWeights::validate(std::size_t token_dim) const {
  require_square(w_q, token_dim, "w_q");
  require_square(w_k, token_dim, "w_k");
  require_square(w_v, token_dim, "w_v");
  if (!(scale_divisor > 0.0)) throw std::invalid_argument("scale_divisor must be positive");
  if (mlp) {
    if (mlp->w_in.cols() != token_dim || mlp->w_out.rows() != token_dim ||
        mlp->w_out.cols() != mlp->w_in.rows()) {
      throw DimensionError("mlp weights incompatible with token dimension " +
                           std::to_string(token_dim));
    }
  }
}

Matrix LayerWeights::mlp_product() const {
  if (!mlp) throw std::invalid_argument("layer has no mlp weights");
  return mlp->w_out * mlp->w_in;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::linear: return "linear";
    case Variant::softmax: return "softmax";
    case Variant::linear_mlp: return "linear_mlp";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& s) {
  if (s == "linear") return Variant::linear;
  if (s == "softmax") return Variant::softmax;
  if (s == "linear_mlp") return Variant::linear_mlp;
  throw std::invalid_argument("unknown stack variant '" + s + "'");
}

Stack::Stack(Variant variant, std::vector<LayerWeights> layers, std::size_t d_in, std::size_t d_out)
    : variant_(variant), layers_(std::move(layers)), d_in_(d_in), d_out_(d_out) {
  if (layers_.empty()) throw std::invalid_argument("Stack: needs at least one layer");
  for (const LayerWeights& w : layers_) {
    w.validate(token_dim());
    if (variant_ == Variant::linear_mlp && !w.mlp) {
      throw std::invalid_argument("Stack: linear_mlp layer without mlp weights");
    }
  }
}

TokenStates forward_linear_layer(const TokenStates& h, const LayerWeights& w) {
  return TokenStates{h.h + linear_attention_term(h, w), h.num_demos};
}

TokenStates forward_softmax_layer(const TokenStates& h, const LayerWeights& w, bool use_scale) {
  w.validate(h.dim());
  const std::size_t n_tok = h.num_demos + 1;
  const Matrix keys = w.w_k * h.h;
  const Matrix queries = w.w_q * h.h;
  const Matrix values = w.w_v * h.demos();
  Matrix scores = keys.transpose() * queries;  // (key i, token j)
  if (use_scale) scores *= 1.0 / w.scale_divisor;

  Matrix weights(h.num_demos, n_tok);
  for (std::size_t j = 0; j < n_tok; ++j) {
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n_tok; ++i) peak = std::max(peak, scores(i, j));
    double denom = 0.0;
    for (std::size_t i = 0; i < n_tok; ++i) denom += std::exp(scores(i, j) - peak);
    // The query key enters the normalizer only; its value column is masked.
    for (std::size_t i = 0; i < h.num_demos; ++i) weights(i, j) = std::exp(scores(i, j) - peak) / denom;
  }
  return TokenStates{h.h + values * weights, h.num_demos};
}

TokenStates forward_mlp_layer(const TokenStates& h, const LayerWeights& w, bool relaxed) {
  if (!w.mlp) throw std::invalid_argument("forward_mlp_layer: mlp weights absent");
  Matrix inner = w.mlp->w_in * linear_attention_term(h, w);
  if (!relaxed) {
    for (double& x : inner.entries()) x = std::max(0.0, x);
  }
  return TokenStates{h.h + w.mlp->w_out * inner, h.num_demos};
}

std::vector<TokenStates> forward_stack(const PromptSequence& p, const Stack& s) {
  if (p.d_in() != s.d_in() || p.d_out() != s.d_out()) {
    throw DimensionError("forward_stack: prompt dimensions do not match the stack");
  }
  std::vector<TokenStates> states;
  states.reserve(s.num_layers() + 1);
  states.push_back(to_states(p));
  for (const LayerWeights& w : s.layers()) {
    const TokenStates& prev = states.back();
    switch (s.variant()) {
      case Variant::linear: states.push_back(forward_linear_layer(prev, w)); break;
      case Variant::softmax: states.push_back(forward_softmax_layer(prev, w, true)); break;
      case Variant::linear_mlp: states.push_back(forward_mlp_layer(prev, w, true)); break;
    }
  }
  return states;
}

Vector read_prediction(std::span<const double> query_token, std::size_t d_in) {
  if (d_in > query_token.size()) throw DimensionError("read_prediction: d_in exceeds token size");
  return Vector(query_token.begin() + static_cast<std::ptrdiff_t>(d_in), query_token.end());
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw std::invalid_argument("matrix must be an array of rows");
  std::vector<Vector> rows;
  for (const auto& row : j) {
    if (!row.is_array()) throw std::invalid_argument("matrix row must be an array");
    Vector r;
    for (const auto& x : row) {
      if (!x.is_number()) throw std::invalid_argument("matrix entry must be a number");
      r.push_back(x.get<double>());
    }
    rows.push_back(std::move(r));
  }
  return Matrix::from_rows(rows);
}

std::string matrix_to_base64(const Matrix& m) {
  static_assert(std::endian::native == std::endian::little, "little-endian host expected");
  const auto bytes = m.entries();
  const std::size_t raw = bytes.size() * sizeof(double);
  std::string out(4 * ((raw + 2) / 3), '\0');
  const int written = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                      reinterpret_cast<const unsigned char*>(bytes.data()),
                                      static_cast<int>(raw));
  out.resize(static_cast<std::size_t>(written));
  return out;
}

Matrix matrix_from_base64(const std::string& b64, std::size_t rows, std::size_t cols) {
  const std::size_t raw = rows * cols * sizeof(double);
  if (b64.size() != 4 * ((raw + 2) / 3)) throw std::invalid_argument("base64 length mismatch");
  std::vector<unsigned char> buf(3 * (b64.size() / 4) + 3);
  const int n = EVP_DecodeBlock(buf.data(), reinterpret_cast<const unsigned char*>(b64.data()),
                                static_cast<int>(b64.size()));
  if (n < 0 || static_cast<std::size_t>(n) < raw) throw std::invalid_argument("bad base64 payload");
  std::vector<double> data(rows * cols);
  std::memcpy(data.data(), buf.data(), raw);
  return Matrix(rows, cols, std::move(data));
}

namespace {

nlohmann::json binary_entry(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", matrix_to_base64(m)}};
}

Matrix load_matrix(const nlohmann::json& layer, const char* key) {
  if (layer.contains("binary") && layer["binary"].contains(key)) {
    const auto& b = layer["binary"][key];
    return matrix_from_base64(b.at("data").get<std::string>(), b.at("rows").get<std::size_t>(),
                              b.at("cols").get<std::size_t>());
  }
  if (!layer.contains(key)) throw std::invalid_argument(std::string("layer missing '") + key + "'");
  return matrix_from_json(layer[key]);
}

}  // namespace

nlohmann::json stack_to_json(const Stack& s, bool binary) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerWeights& w : s.layers()) {
    nlohmann::json l{{"w_q", matrix_to_json(w.w_q)},
                     {"w_k", matrix_to_json(w.w_k)},
                     {"w_v", matrix_to_json(w.w_v)},
                     {"scale_divisor", w.scale_divisor}};
    if (w.mlp) {
      l["mlp"] = {{"w_in", matrix_to_json(w.mlp->w_in)}, {"w_out", matrix_to_json(w.mlp->w_out)}};
    }
    if (binary) {
      nlohmann::json b{{"w_q", binary_entry(w.w_q)},
                       {"w_k", binary_entry(w.w_k)},
                       {"w_v", binary_entry(w.w_v)}};
      if (w.mlp) {
        b["w_in"] = binary_entry(w.mlp->w_in);
        b["w_out"] = binary_entry(w.mlp->w_out);
      }
      l["binary"] = std::move(b);
    }
    layers.push_back(std::move(l));
  }
  return {{"variant", to_string(s.variant())},
          {"dims", {{"d_in", s.d_in()}, {"d_out", s.d_out()}}},
          {"layers", std::move(layers)}};
}

Stack stack_from_json(const nlohmann::json& j) {
  const Variant variant = variant_from_string(j.at("variant").get<std::string>());
  const auto d_in = j.at("dims").at("d_in").get<std::size_t>();
  const auto d_out = j.at("dims").at("d_out").get<std::size_t>();
  std::vector<LayerWeights> layers;
  for (const auto& l : j.at("layers")) {
    LayerWeights w{load_matrix(l, "w_q"), load_matrix(l, "w_k"), load_matrix(l, "w_v"),
                   std::nullopt, l.value("scale_divisor", 1.0)};
    if (l.contains("mlp")) {
      nlohmann::json merged = l["mlp"];
      if (l.contains("binary")) merged["binary"] = l["binary"];
      w.mlp = MlpWeights{load_matrix(merged, "w_in"), load_matrix(merged, "w_out")};
    }
    layers.push_back(std::move(w));
  }
  return Stack(variant, std::move(layers), d_in, d_out);
}

}  // namespace iclgd
