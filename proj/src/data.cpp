// SPDX-License-Identifier: Apache-2.0

#include "letlab/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>

#include "letlab/random.hpp"

namespace letlab {

namespace {

constexpr char kTokenMagic[8] = {'L', 'E', 'T', 'T', 'O', 'K', '0', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void Corpus::validate() const {
  if (tokens.size() < 2) throw ConfigError("corpus: needs at least 2 tokens, got " + std::to_string(tokens.size()));
  if (vocab_size < 1) throw ConfigError("corpus: vocab_size must be positive");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab_size) {
      throw ConfigError("corpus: token " + std::to_string(tokens[i]) + " at offset " + std::to_string(i) +
                        " is outside vocab_size " + std::to_string(vocab_size));
    }
  }
}

Corpus tokenize_bytes(std::string_view bytes) {
  if (bytes.empty()) throw ConfigError("tokenize_bytes: empty input");
  Corpus c;
  c.vocab_size = 256;
  c.provenance = Provenance::file;
  c.tokens.reserve(bytes.size());
  for (char ch : bytes) c.tokens.push_back(static_cast<unsigned char>(ch));
  return c;
}

std::string detokenize_bytes(const Corpus& corpus) {
  std::string out;
  out.reserve(corpus.tokens.size());
  for (auto t : corpus.tokens) {
    if (t < 0 || t > 255) throw ConfigError("detokenize_bytes: token " + std::to_string(t) + " is not a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  }
  return out;
}

Corpus read_byte_file(const std::filesystem::path& path) { return tokenize_bytes(slurp(path)); }

void write_token_file(const std::filesystem::path& path, const Corpus& corpus) {
  std::string out(kTokenMagic, sizeof kTokenMagic);
  out.reserve(12 + 4 * corpus.tokens.size());
  put_u32(out, static_cast<std::uint32_t>(corpus.vocab_size));
  for (auto t : corpus.tokens) put_u32(out, static_cast<std::uint32_t>(t));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

Corpus read_token_file(const std::filesystem::path& path) {
  std::string raw = slurp(path);
  if (raw.size() < 12 || raw.compare(0, 8, kTokenMagic, 8) != 0) {
    throw IoError(path.string() + ": not a LETTOK01 token file");
  }
  if ((raw.size() - 12) % 4 != 0) throw IoError(path.string() + ": truncated token payload");
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  Corpus c;
  c.vocab_size = get_u32(p + 8);
  c.provenance = Provenance::file;
  c.tokens.resize((raw.size() - 12) / 4);
  for (std::size_t i = 0; i < c.tokens.size(); ++i) c.tokens[i] = static_cast<std::int32_t>(get_u32(p + 12 + 4 * i));
  c.validate();
  return c;
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split: train fraction must be in (0, 1)");
  auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(corpus.size()) * train_fraction));
  Corpus train{{corpus.tokens.begin(), corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut)}, corpus.vocab_size,
               corpus.provenance};
  Corpus test{{corpus.tokens.begin() + static_cast<std::ptrdiff_t>(cut), corpus.tokens.end()}, corpus.vocab_size,
              corpus.provenance};
  return {std::move(train), std::move(test)};
}

std::size_t MarkovSpec::num_contexts() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < order; ++i) n *= vocab_size;
  return n;
}

void MarkovSpec::validate() const {
  if (vocab_size < 1) throw ConfigError("markov: vocab_size must be positive");
  if (order > 8) throw ConfigError("markov: order above 8 is not supported");
  if (table.size() != num_contexts()) {
    throw ConfigError("markov: table needs " + std::to_string(num_contexts()) + " rows for order " +
                      std::to_string(order) + ", got " + std::to_string(table.size()));
  }
  for (std::size_t r = 0; r < table.size(); ++r) {
    if (table[r].size() != vocab_size) {
      throw ConfigError("markov: row " + std::to_string(r) + " has " + std::to_string(table[r].size()) +
                        " entries, expected " + std::to_string(vocab_size));
    }
    double s = 0.0;
    for (double p : table[r]) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("markov: row " + std::to_string(r) + " has an invalid probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("markov: row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}

std::vector<double> MarkovSpec::stationary() const {
  validate();
  const std::size_t n = num_contexts();
  std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
  // Lazy chain (P + I) / 2: same fixed points, aperiodic.
  for (int it = 0; it < 1000000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t c = 0; c < n; ++c) {
      next[c] += 0.5 * pi[c];
      for (std::size_t t = 0; t < vocab_size; ++t) {
        next[(c * vocab_size + t) % n] += 0.5 * pi[c] * table[c][t];
      }
    }
    double diff = 0.0;
    for (std::size_t c = 0; c < n; ++c) diff += std::abs(next[c] - pi[c]);
    pi.swap(next);
    if (diff < 1e-15) break;
  }
  return pi;
}

double MarkovSpec::entropy_rate() const {
  auto pi = stationary();
  double h = 0.0;
  for (std::size_t c = 0; c < pi.size(); ++c) {
    double row = 0.0;
    for (double p : table[c]) {
      if (p > 0.0) row -= p * std::log(p);
    }
    h += pi[c] * row;
  }
  return h;
}

Corpus gen_markov_corpus(const MarkovSpec& spec, std::size_t length) {
  spec.validate();
  if (length < spec.order + 1 || length < 2) {
    throw ConfigError("markov: length " + std::to_string(length) + " is shorter than order + 1");
  }
  Rng rng(spec.seed);
  const std::size_t n = spec.num_contexts();
  Corpus c;
  c.vocab_size = spec.vocab_size;
  c.provenance = Provenance::synthetic;
  c.tokens.reserve(length);
  c.tokens.assign(spec.order, 0);
  std::size_t ctx = 0;
  while (c.tokens.size() < length) {
    const auto& row = spec.table[ctx];
    double u = rng.uniform();
    std::size_t t = 0;
    double acc = row[0];
    while (u >= acc && t + 1 < spec.vocab_size) acc += row[++t];
    // Guard against rounding landing on a zero-probability tail entry.
    while (row[t] == 0.0 && t > 0) --t;
    c.tokens.push_back(static_cast<std::int32_t>(t));
    ctx = (ctx * spec.vocab_size + t) % n;
  }
  return c;
}

double empirical_entropy(const Corpus& corpus, std::size_t order) {
  std::map<std::vector<std::int32_t>, std::map<std::int32_t, std::size_t>> counts;
  std::size_t total = 0;
  for (std::size_t i = order; i < corpus.tokens.size(); ++i) {
    std::vector<std::int32_t> key(corpus.tokens.begin() + static_cast<std::ptrdiff_t>(i - order),
                                  corpus.tokens.begin() + static_cast<std::ptrdiff_t>(i));
    ++counts[key][corpus.tokens[i]];
    ++total;
  }
  double h = 0.0;
  for (const auto& [key, next] : counts) {
    std::size_t row = 0;
    for (const auto& [tok, k] : next) row += k;
    for (const auto& [tok, k] : next) {
      double p = static_cast<double>(k) / static_cast<double>(row);
      h -= static_cast<double>(k) / static_cast<double>(total) * std::log(p);
    }
  }
  return h;
}

BatchIterator::BatchIterator(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed)
    : corpus_(&corpus), batch_size_(batch_size), seq_len_(seq_len), seed_(seed) {
  if (batch_size == 0 || seq_len == 0) throw ConfigError("batches: batch_size and seq_len must be positive");
  if (corpus.size() < 2 || corpus.size() - 1 < batch_size * seq_len) {
    throw ConfigError("batches: corpus of " + std::to_string(corpus.size()) + " tokens is shorter than one batch of " +
                      std::to_string(batch_size) + " x " + std::to_string(seq_len) + " windows");
  }
  batches_per_epoch_ = (corpus.size() - 1) / (batch_size * seq_len);
  shuffle_epoch();
}

void BatchIterator::shuffle_epoch() {
  order_.resize(batches_per_epoch_ * batch_size_);
  for (std::size_t w = 0; w < order_.size(); ++w) order_[w] = w * seq_len_;
  Rng rng(derive_seed(seed_, "epoch-" + std::to_string(cursor_.epoch)));
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
}

TokenBatch BatchIterator::next() {
  if (cursor_.index == batches_per_epoch_) {
    ++cursor_.epoch;
    cursor_.index = 0;
    shuffle_epoch();
  }
  TokenBatch b;
  b.batch = batch_size_;
  b.seq = seq_len_;
  b.inputs.reserve(batch_size_ * seq_len_);
  b.targets.reserve(batch_size_ * seq_len_);
  const auto& tok = corpus_->tokens;
  for (std::size_t r = 0; r < batch_size_; ++r) {
    std::size_t start = order_[cursor_.index * batch_size_ + r];
    b.inputs.insert(b.inputs.end(), tok.begin() + static_cast<std::ptrdiff_t>(start),
                    tok.begin() + static_cast<std::ptrdiff_t>(start + seq_len_));
    b.targets.insert(b.targets.end(), tok.begin() + static_cast<std::ptrdiff_t>(start + 1),
                     tok.begin() + static_cast<std::ptrdiff_t>(start + seq_len_ + 1));
  }
  ++cursor_.index;
  return b;
}

void BatchIterator::seek(Cursor cursor) {
  if (cursor.index > batches_per_epoch_) throw ConfigError("batches: cursor index beyond the epoch");
  cursor_ = cursor;
  shuffle_epoch();
}

std::vector<TokenBatch> batches(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed,
                                std::size_t count) {
  BatchIterator it(corpus, batch_size, seq_len, seed);
  std::vector<TokenBatch> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(it.next());
  return out;
}

std::vector<TokenBatch> sequential_batches(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len) {
  if (batch_size == 0 || seq_len == 0) throw ConfigError("sequential_batches: batch_size and seq_len must be positive");
  const std::size_t windows = corpus.size() < 2 ? 0 : (corpus.size() - 1) / seq_len;
  std::vector<TokenBatch> out;
  const auto& tok = corpus.tokens;
  for (std::size_t w = 0; w < windows; w += batch_size) {
    TokenBatch b;
    b.batch = std::min(batch_size, windows - w);
    b.seq = seq_len;
    for (std::size_t r = 0; r < b.batch; ++r) {
      std::size_t start = (w + r) * seq_len;
      b.inputs.insert(b.inputs.end(), tok.begin() + static_cast<std::ptrdiff_t>(start),
                      tok.begin() + static_cast<std::ptrdiff_t>(start + seq_len));
      b.targets.insert(b.targets.end(), tok.begin() + static_cast<std::ptrdiff_t>(start + 1),
                       tok.begin() + static_cast<std::ptrdiff_t>(start + seq_len + 1));
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace letlab
