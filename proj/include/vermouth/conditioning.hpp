#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vermouth/params.hpp"
#include "vermouth/rng.hpp"

namespace vermouth {

inline constexpr int kVocabSize = 1024;
inline constexpr int kContextLength = 16;
inline constexpr int kPadId = 0;
// Row budget for the all-classes context.
inline constexpr int kAllClassesCapacity = 64;
inline constexpr int kRandomPromptLength = 8;

struct TextConfig {
  int vocab = kVocabSize;
  int context = kContextLength;
  int dim = 64;
};

enum class PromptMode { kNull, kRandom, kAligned, kAllClasses };
std::string to_string(PromptMode mode);
PromptMode parse_prompt_mode(const std::string& s);

// Lowercased whitespace words hashed (FNV-1a) into ids 1..vocab-1; truncated
// to the context length. Pad id 0 is never produced here.
std::vector<int> tokenize(const std::string& text);
std::vector<int> pad_tokens(std::vector<int> tokens, int length = kContextLength);
// Substitutes name for the first "{}" in the template.
std::string format_template(const std::string& tmpl, const std::string& name);

template <typename T>
void init_text_encoder(ParamStore<T>& params, const TextConfig& cfg, Rng& rng);

template <typename T>
struct TextEncoding {
  Var<T> seq;     // (n_tokens, d); pad positions are dropped
  Var<T> pooled;  // (1, d): mean over non-pad positions, zero for empty input
};

// Embedding + position embedding, then a residual two-layer transform. With
// use_projection the final linear projection is applied to seq and pooled;
// otherwise the pre-projection features are returned.
template <typename T>
TextEncoding<T> encode_text(const std::vector<int>& tokens, const ParamStore<T>& params, bool use_projection);

template <typename T>
struct PromptCondition {
  std::vector<int> tokens;
  Var<T> seq;     // (n, d); the null prompt is the single learned null row
  Var<T> pooled;  // (1, d), L2-normalized (zero if degenerate)
  PromptMode mode = PromptMode::kNull;
  bool projected = false;
};

struct PromptRequest {
  PromptMode mode = PromptMode::kAligned;
  std::string caption;
  std::vector<std::string> class_names;
  std::string tmpl = "a photo of a {}";
  bool use_projection = false;
};

template <typename T>
PromptCondition<T> make_prompt(const PromptRequest& req, const ParamStore<T>& params, Rng& rng);

template <typename T>
PromptCondition<T> null_prompt(const ParamStore<T>& params);

template <typename T>
struct ClassifierWeights {
  Tensor<T> weights;  // (N, d), rows L2-normalized
  std::vector<std::string> class_names;
  std::string tmpl;
  bool projected = false;
};

template <typename T>
ClassifierWeights<T> build_classifier_weights(const std::vector<std::string>& class_names, const std::string& tmpl,
                                              const ParamStore<T>& params, bool use_projection);

}  // namespace vermouth
