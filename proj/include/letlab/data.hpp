// SPDX-License-Identifier: Apache-2.0
//
// Corpora (raw bytes, token files, synthetic Markov sources) and
// deterministic batching.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "letlab/tensor.hpp"
#include "letlab/token_batch.hpp"

namespace letlab {

class IoError : public Error {
 public:
  using Error::Error;
};

enum class Provenance { file, synthetic };

struct Corpus {
  std::vector<std::int32_t> tokens;
  std::size_t vocab_size = 0;
  Provenance provenance = Provenance::file;

  /// Every id below vocab_size and at least two tokens.
  void validate() const;
  std::size_t size() const { return tokens.size(); }
};

Corpus tokenize_bytes(std::string_view bytes);
std::string detokenize_bytes(const Corpus& corpus);
Corpus read_byte_file(const std::filesystem::path& path);

/// "LETTOK01", u32 vocab_size, then u32 ids, all little-endian.
void write_token_file(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_token_file(const std::filesystem::path& path);

/// Leading `train_fraction` of the tokens (rounded down) and the rest.
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double train_fraction);

/// Finite-order Markov source over `vocab_size` symbols. `table` has one row
/// per context (vocab_size^order rows; the oldest token is the most
/// significant digit of the row index) holding next-token probabilities.
struct MarkovSpec {
  std::size_t order = 1;
  std::size_t vocab_size = 2;
  std::vector<std::vector<double>> table;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t num_contexts() const;
  /// Stationary distribution over contexts, reached from the uniform start.
  std::vector<double> stationary() const;
  /// -sum_c pi(c) sum_t p(t|c) log p(t|c), in nats per token.
  double entropy_rate() const;
};

/// Starts from the all-zero context (emitted as the first `order` tokens),
/// then samples. Deterministic in spec.seed.
Corpus gen_markov_corpus(const MarkovSpec& spec, std::size_t length);

/// Plug-in conditional entropy of `corpus` given the previous `order`
/// tokens, in nats.
double empirical_entropy(const Corpus& corpus, std::size_t order);

/// Shuffled, non-overlapping seq_len windows. An epoch holds
/// floor((N - 1) / (batch_size * seq_len)) full batches drawn from the
/// leading windows; the tail is dropped. Each epoch reshuffles with a seed
/// derived from (seed, epoch).
class BatchIterator {
 public:
  struct Cursor {
    std::uint64_t epoch = 0;
    std::size_t index = 0;
    bool operator==(const Cursor&) const = default;
  };

  BatchIterator(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed);

  std::size_t batches_per_epoch() const { return batches_per_epoch_; }
  TokenBatch next();
  Cursor cursor() const { return cursor_; }
  void seek(Cursor cursor);
  /// Window start offsets of the current epoch in emission order.
  const std::vector<std::size_t>& epoch_windows() const { return order_; }

 private:
  void shuffle_epoch();

  const Corpus* corpus_;
  std::size_t batch_size_, seq_len_;
  std::uint64_t seed_;
  std::size_t batches_per_epoch_;
  std::vector<std::size_t> order_;
  Cursor cursor_;
};

/// First `count` batches of a fresh iterator.
std::vector<TokenBatch> batches(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed,
                                std::size_t count);

/// All floor((N - 1) / seq_len) windows in corpus order, grouped into
/// batches of up to `batch_size` (the last may be smaller).
std::vector<TokenBatch> sequential_batches(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len);

}  // namespace letlab
