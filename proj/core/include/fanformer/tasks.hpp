// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fanformer {

struct SplitError : std::runtime_error {
  explicit SplitError(const std::string& what) : std::runtime_error(what) {}
};
struct InputError : std::runtime_error {
  explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

/// Per-character vocabulary over a small symbol set.
struct Vocab {
  std::vector<char> id_to_char;
  std::map<char, int> char_to_id;

  void add(char c);
  int encode_char(char c) const;
  std::vector<int> encode(const std::string& s) const;
  std::string decode(const std::vector<int>& ids) const;
  std::size_t size() const { return id_to_char.size(); }
};

/// One supervised sequence: full token string plus the index of the first
/// answer token (supervision starts there).
struct Sample {
  std::vector<int> tokens;
  std::size_t answer_start = 0;
  int a = 0, b = 0;  // grid coordinates for arithmetic tasks
  long long c = 0;
};

struct SquareSplit {
  int center_a = 0, center_b = 0, side = 0;
};

enum class TaskKind { mod_add, lin_reg, mod_fn, text };

struct TaskDataset {
  TaskKind kind = TaskKind::mod_add;
  Vocab vocab;
  std::vector<Sample> samples;
  std::vector<std::size_t> train_idx, test_idx;
  std::optional<SquareSplit> square;
  // mod_fn bookkeeping
  int modulus = 0;
  bool regression = false;

  const Sample& sample(std::size_t idx) const { return samples[idx]; }
  std::string prompt_of(const Sample& s) const;
  std::string answer_of(const Sample& s) const;
};

// x -> x mod modulus for x in [0, domain_size), answer tokenized as digits by
// default, or treated as a scalar regression target when regression=true.
TaskDataset gen_mod_function(int modulus, int domain_size, double train_fraction,
                             std::uint64_t seed, bool regression = false);

// All 113^2 pairs, c = (a + b) mod 113, prompt "a + b=".
TaskDataset gen_modular_addition();

// All 100^2 pairs, c = a + 2b + 3, prompt "(a, b)=".
TaskDataset gen_linear_regression();

// Closed-square test split centred at (center_a, center_b); rewrites the
// dataset's train/test indices and enforces the token-coverage invariant.
void leave_square_out(TaskDataset& dataset, int center_a, int center_b, int side);

// Character-level LM over the file's bytes: non-overlapping windows of
// seq_len+1 tokens, every 20th window held out for validation.
struct TextDataset {
  Vocab vocab;
  std::vector<int> tokens;
  std::size_t seq_len = 0;
  std::vector<std::size_t> train_windows, val_windows;

  std::vector<int> window(std::size_t w) const;
};

TextDataset load_text_corpus(const std::filesystem::path& path, std::size_t seq_len);
TextDataset text_corpus_from_string(const std::string& text, std::size_t seq_len);

void export_jsonl(const TaskDataset& dataset, const std::filesystem::path& path);

}  // namespace fanformer
