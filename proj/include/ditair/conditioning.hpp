#pragma once

#include <string>
#include <vector>

#include "ditair/rng.hpp"
#include "ditair/tensor.hpp"

namespace ditair {
namespace cond {

// =============================================================================
// Conditioning bundle
// =============================================================================
//
// A bundle carries encoder-width features; the diffusion model owns the
// projections into its own width along with the learned null embeddings, so
// bundles stay model-independent and one encoder can feed any model size.

template <typename T>
struct CondBundle {
    Tensor<T> ctx;     // [l, d_enc] token features
    Tensor<T> pooled;  // [d_enc]
    bool is_null = false;
};

// Batched, fixed-length view consumed by model forwards. Sequences shorter
// than l_text are zero-padded, longer ones truncated. null_mask marks the
// samples whose features the model must replace with its learned null
// embedding (so the gradient reaches that embedding).
template <typename T>
struct CondBatch {
    Tensor<T> ctx;     // [B * l_text, d_enc]
    Tensor<T> pooled;  // [B, d_enc]
    std::vector<uint8_t> null_mask;
    int64_t batch = 0;
    int64_t l_text = 0;
};

// =============================================================================
// Toy text encoder
// =============================================================================
//
// A frozen, seeded stand-in for a pretrained text tower: an embedding table
// followed by M mixing layers h^k = tanh(O_k h^{k-1} + 0.5 C_k m), where
// O_k, C_k are random orthogonal maps and m couples tokens: the prefix mean
// up to each token in causal mode, the global mean in bidirectional mode.
// Every hidden state h^1..h^M is exposed for layer selection.

enum class EncoderMode { Causal, Bidirectional };

template <typename T>
struct ToyEncoder {
    int64_t vocab = 0;
    int64_t d_enc = 0;
    int64_t n_layers = 0;
    EncoderMode mode = EncoderMode::Bidirectional;
    Tensor<T> embed;               // [vocab, d_enc]
    std::vector<Tensor<T>> mix;    // M orthogonal [d_enc, d_enc]
    std::vector<Tensor<T>> couple; // M orthogonal [d_enc, d_enc]
};

template <typename T>
ToyEncoder<T> make_toy_encoder(int64_t vocab, int64_t d_enc, int64_t n_layers,
                               EncoderMode mode, uint64_t seed);

// All hidden states h^1..h^M, each [l, d_enc]. Throws ConfigError on an out
// of range token id, DimensionError on an empty sequence.
template <typename T>
std::vector<Tensor<T>> hidden_states(const ToyEncoder<T>& enc,
                                     const std::vector<int32_t>& ids);

// Feature-wise concatenation of the selected layers (1-based indices),
// shape [l, K * d_enc]. Throws ConfigError on an index outside [1..M].
template <typename T>
Tensor<T> concat_layers(const std::vector<Tensor<T>>& states,
                        const std::vector<int64_t>& spec);

// [K * d_enc, d_enc] projection initialized to [I; 0; ...]: a singleton
// selection passes through unchanged.
template <typename T>
Tensor<T> identity_projection(int64_t k, int64_t d_enc);

// causal -> last token's vector, bidirectional -> mean over tokens.
template <typename T>
Tensor<T> pool(const Tensor<T>& hidden, EncoderMode mode);

// Full pipeline: hidden states -> selected-layer concat -> projection to
// d_enc -> pooling. encode uses the identity-initialized projection.
template <typename T>
CondBundle<T> encode(const ToyEncoder<T>& enc, const std::vector<int32_t>& ids,
                     const std::vector<int64_t>& layer_spec);

template <typename T>
CondBundle<T> encode_with_projection(const ToyEncoder<T>& enc,
                                     const std::vector<int32_t>& ids,
                                     const std::vector<int64_t>& layer_spec,
                                     const Tensor<T>& proj);

// =============================================================================
// Null condition and training-time dropping
// =============================================================================

// Placeholder features plus the is_null flag; the model substitutes its
// learned null embedding wherever the flag is set.
template <typename T>
CondBundle<T> null_condition(int64_t l, int64_t d_enc);

// Replaces the bundle with the null condition with probability p_drop.
template <typename T>
CondBundle<T> drop_condition(CondBundle<T> b, Rng& rng, double p_drop);

// Packs per-sample bundles into fixed-length batch tensors.
template <typename T>
CondBatch<T> pack_bundles(const std::vector<CondBundle<T>>& bundles, int64_t l_text);

// =============================================================================
// Prompt files: one token-id sequence per line, whitespace-separated.
// =============================================================================

std::vector<std::vector<int32_t>> parse_prompt_file(const std::string& path);

}  // namespace cond
}  // namespace ditair
