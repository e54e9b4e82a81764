#pragma once
//
// Toy transformer stacks over in-context prompts. Tokens are columns
// h = [x; y] of height d_in + d_out; the query token is the last column and
// enters with y = 0. Every layer updates all tokens, with values masked to
// the demonstration columns.
//

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclgd/numlin.hpp"

namespace iclgd {

struct Token {
  Vector x;
  Vector y;
};

class PromptSequence {
 public:
  PromptSequence(std::vector<Token> demos, Vector query_x, std::size_t d_out);

  const std::vector<Token>& demos() const noexcept { return demos_; }
  const Token& query() const noexcept { return query_; }
  std::size_t num_demos() const noexcept { return demos_.size(); }
  std::size_t d_in() const noexcept { return query_.x.size(); }
  std::size_t d_out() const noexcept { return query_.y.size(); }
  std::size_t token_dim() const noexcept { return d_in() + d_out(); }

 private:
  std::vector<Token> demos_;
  Token query_;
};

// Token matrix H (token_dim x (N + 1)), query in the last column.
struct TokenStates {
  Matrix h;
  std::size_t num_demos = 0;

  std::size_t dim() const noexcept { return h.rows(); }
  Matrix demos() const { return h.col_block(0, num_demos); }
  Vector query() const { return h.col(num_demos); }
};

TokenStates to_states(const PromptSequence& p);

struct MlpWeights {
  Matrix w_in;   // dim2 x token_dim
  Matrix w_out;  // token_dim x dim2
};

struct LayerWeights {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;
  std::optional<MlpWeights> mlp;
  double scale_divisor = 1.0;  // sqrt(d_scale); 1 disables scaling

  std::size_t dim() const noexcept { return w_q.rows(); }
  void validate(std::size_t token_dim) const;
  // w_out * w_in
  Matrix mlp_product() const;
};

enum class Variant { linear, softmax, linear_mlp };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

class Stack {
 public:
  Stack(Variant variant, std::vector<LayerWeights> layers, std::size_t d_in, std::size_t d_out);

  Variant variant() const noexcept { return variant_; }
  const std::vector<LayerWeights>& layers() const noexcept { return layers_; }
  const LayerWeights& layer(std::size_t l) const { return layers_.at(l); }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  std::size_t d_in() const noexcept { return d_in_; }
  std::size_t d_out() const noexcept { return d_out_; }
  std::size_t token_dim() const noexcept { return d_in_ + d_out_; }

 private:
  Variant variant_;
  std::vector<LayerWeights> layers_;
  std::size_t d_in_;
  std::size_t d_out_;
};

// h_j + W_V H_s (W_K H_s)ᵀ W_Q h_j for every token j.
TokenStates forward_linear_layer(const TokenStates& h, const LayerWeights& w);

// Softmax over all N + 1 key scores per token, values masked to demonstrations.
TokenStates forward_softmax_layer(const TokenStates& h, const LayerWeights& w, bool use_scale);

// relaxed: h_j + W_out W_in a_j; otherwise h_j + W_out relu(W_in a_j), where
// a_j is the linear attention term of token j.
TokenStates forward_mlp_layer(const TokenStates& h, const LayerWeights& w, bool relaxed);

// States h^0 .. h^L. Softmax stacks divide scores by each layer's scale_divisor.
std::vector<TokenStates> forward_stack(const PromptSequence& p, const Stack& s);

// y-slot of a query token.
Vector read_prediction(std::span<const double> query_token, std::size_t d_in);

// Serialization. Matrices are nested row arrays; with `binary`, each layer
// also carries exact little-endian base64 copies that take precedence on load.
nlohmann::json stack_to_json(const Stack& s, bool binary = false);
Stack stack_from_json(const nlohmann::json& j);

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);
std::string matrix_to_base64(const Matrix& m);
Matrix matrix_from_base64(const std::string& b64, std::size_t rows, std::size_t cols);

}  // namespace iclgd
