#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace p2r {

// Symbol <-> id map with four special ids appended after the base vocabulary.
// The default is byte-level (ids 0..255 are raw bytes); an external vocabulary
// file (one token per line, line number = id) can replace it, in which case
// encoding is greedy longest-match.
class Tokenizer {
 public:
  static Tokenizer byte_level();
  static Tokenizer from_vocab_file(const std::string& path);

  int vocab_size() const { return n_base_ + 4; }
  int pad_id() const { return n_base_; }
  int sentinel_id() const { return n_base_ + 1; }
  int begin_id() const { return n_base_ + 2; }
  int end_id() const { return n_base_ + 3; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  int n_base_ = 0;
  bool byte_mode_ = true;
  std::vector<std::string> entries_;   // id -> token text
  int max_entry_len_ = 1;
};

// Fixed-length token sequences in a seeded shuffled order. Materialized up
// front; desk-scale corpora fit comfortably in memory.
struct SequenceStream {
  int seq_len = 0;
  std::vector<std::vector<int>> sequences;

  std::size_t size() const { return sequences.size(); }
  // Deterministically reserves the last `n` sequences as a held-out split.
  SequenceStream take_eval_split(std::size_t n);
};

// Reads a file (or every regular file in a directory, lexicographic order),
// tokenizes each file as one document, chunks into seq_len blocks (last block
// padded), and shuffles sequences with a seeded permutation.
SequenceStream ingest_corpus(const std::string& path, int seq_len, const Tokenizer& tokenizer,
                             std::uint64_t seed);

enum class TaskTag { LM, DENOISE };

struct Batch {
  int batch = 0;
  int seq = 0;
  TaskTag task = TaskTag::LM;
  std::vector<int> input;            // batch*seq
  std::vector<int> target;           // batch*seq; pad id where undefined
  std::vector<std::uint8_t> mask;    // 1 where the target contributes to the loss

  int mask_count() const;
};

// Next-token prediction: targets are inputs shifted left by one; the mask
// covers positions whose target is a real (non-pad) token.
Batch make_lm_batch(const std::vector<const std::vector<int>*>& rows, int pad_id);

// Span corruption: contiguous spans (geometric length, mean `mean_span`)
// are replaced by the sentinel id; targets hold the original tokens at
// exactly the corrupted positions. corrupt_ratio must lie in (0, 0.5).
Batch make_denoise_batch(const std::vector<const std::vector<int>*>& rows, int pad_id,
                         int sentinel_id, float corrupt_ratio, double mean_span,
                         std::uint64_t rng_seed);

struct BatchSettings {
  int batch_size = 8;
  float corrupt_ratio = 0.15f;
  double mean_span = 3.0;
  int lm_cycle = 1;       // task schedule: lm_cycle LM batches then
  int denoise_cycle = 1;  // denoise_cycle DENOISE batches, repeating
  std::uint64_t seed = 0;
};

// Deterministic batch cursor over a SequenceStream. Batch content is a pure
// function of (settings.seed, batch index), so resuming from a checkpoint is
// just seek(). Epoch boundaries reshuffle with a per-epoch seed.
class BatchStream {
 public:
  BatchStream(const SequenceStream& stream, int pad_id, int sentinel_id, BatchSettings settings);

  Batch next();
  void seek(std::uint64_t batch_index);
  std::uint64_t cursor() const { return cursor_; }
  const BatchSettings& settings() const { return settings_; }

 private:
  TaskTag task_for(std::uint64_t index) const;
  const SequenceStream* stream_;
  int pad_id_;
  int sentinel_id_;
  BatchSettings settings_;
  std::uint64_t cursor_ = 0;
  // Sequence order for the current epoch.
  std::uint64_t epoch_ = static_cast<std::uint64_t>(-1);
  std::vector<std::uint32_t> order_;
  void ensure_epoch(std::uint64_t epoch);
};

}  // namespace p2r
