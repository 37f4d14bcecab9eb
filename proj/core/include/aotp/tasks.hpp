#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "aotp/tensor.hpp"

namespace aotp {

struct Example {
  std::vector<TokenId> tokens;
  std::size_t label = 0;
};

enum class TaskKind { token_identity, constant_separable };

std::string_view to_string(TaskKind kind) noexcept;
TaskKind parse_task_kind(std::string_view name);

struct TaskSizes {
  std::size_t train = 2000;
  std::size_t dev = 500;
  std::size_t seq_len = 16;      // including the leading CLS token
  std::size_t vocab_size = 256;
  std::size_t num_classes = 2;   // token_identity only; constant_separable is binary
  std::size_t targets = 128;     // token_identity: size of the labeled sub-vocabulary
};

// Vocabulary layout shared by both generators.
inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kClsToken = 1;
inline constexpr TokenId kMarkerToken = 7;  // constant_separable trigger

// Synthetic classification task.
//
// token_identity: ids [2, 2 + targets) form a labeled sub-vocabulary whose
// class assignment is a seeded shuffle. The marked position is position 0
// (the pooled one): it holds a labeled token, the rest are filler ids, and
// the label is the class of the marked token.
//
// constant_separable: sequences start with CLS; label 1 iff token 7 occurs
// anywhere in the sequence.
//
// Sequences have a random length in [seq_len / 2, seq_len] and are
// right-padded with id 0. Classes are balanced exactly by quota
// rejection and no dev sequence occurs in the training split.
struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::token_identity;
  std::uint64_t seed = 0;
  TaskSizes sizes;
  std::size_t num_classes = 2;
  std::string rule;
  std::vector<int> token_class;  // class per token id, -1 for unlabeled ids (token_identity)
  std::vector<Example> train;
  std::vector<Example> dev;
};

TaskSpec make_task(TaskKind kind, std::uint64_t seed, const TaskSizes& sizes = {});

}  // namespace aotp
