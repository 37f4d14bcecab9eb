#include "aotp/tasks.hpp"

#include <set>

#include "aotp/error.hpp"
#include "aotp/rng.hpp"

namespace aotp {

std::string_view to_string(TaskKind kind) noexcept {
  return kind == TaskKind::token_identity ? "token_identity" : "constant_separable";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "token_identity") return TaskKind::token_identity;
  if (name == "constant_separable") return TaskKind::constant_separable;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

namespace {

void validate_sizes(TaskKind kind, const TaskSizes& s) {
  if (s.seq_len < 2) throw ConfigError("task sequences need at least two positions");
  if (s.train == 0 || s.dev == 0) throw ConfigError("task splits must be non-empty");
  if (kind == TaskKind::token_identity) {
    if (s.num_classes < 2) throw ConfigError("token_identity needs at least two classes");
    if (s.targets < s.num_classes) throw ConfigError("token_identity needs at least one target per class");
    if (s.vocab_size < 3 + s.targets) throw ConfigError("vocabulary too small for the requested targets");
  } else if (s.vocab_size <= kMarkerToken + 1) {
    throw ConfigError("constant_separable needs a vocabulary larger than the marker token");
  }
}

// Draws examples until every class quota is filled, skipping sequences seen
// before (in either split).
template <typename Draw>
std::vector<Example> fill_split(std::size_t size, std::size_t classes, Draw&& draw,
                                std::set<std::vector<TokenId>>& seen) {
  std::vector<std::size_t> quota(classes, size / classes);
  for (std::size_t c = 0; c < size % classes; ++c) ++quota[c];
  std::vector<Example> out;
  out.reserve(size);
  const std::size_t max_attempts = 1000 * size + 100000;
  for (std::size_t attempt = 0; out.size() < size; ++attempt) {
    if (attempt >= max_attempts) throw ConfigError("task generator could not fill the split; vocabulary too small?");
    Example ex = draw();
    if (quota[ex.label] == 0) continue;
    if (!seen.insert(ex.tokens).second) continue;
    --quota[ex.label];
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

TaskSpec make_task(TaskKind kind, std::uint64_t seed, const TaskSizes& sizes) {
  validate_sizes(kind, sizes);
  TaskSpec task;
  task.kind = kind;
  task.seed = seed;
  task.sizes = sizes;
  task.name = std::string(to_string(kind)) + "-" + std::to_string(seed);
  CounterRng rng(seed, 0x7A5C + static_cast<std::uint64_t>(kind));
  const std::size_t n = sizes.seq_len;
  const std::size_t V = sizes.vocab_size;

  auto random_length = [&] { return n / 2 + rng.below(n - n / 2 + 1); };
  std::set<std::vector<TokenId>> seen;

  if (kind == TaskKind::token_identity) {
    const std::size_t C = sizes.num_classes;
    const std::size_t T = sizes.targets;
    task.num_classes = C;
    task.rule = "label = class of the token at the pooled position 0, drawn from ids [2, " +
                std::to_string(2 + T) + "); classes assigned by a seeded shuffle";
    std::vector<TokenId> targets(T);
    for (std::size_t i = 0; i < T; ++i) targets[i] = static_cast<TokenId>(2 + i);
    shuffle(targets, rng);
    task.token_class.assign(V, -1);
    for (std::size_t i = 0; i < T; ++i) task.token_class[targets[i]] = static_cast<int>(i % C);

    const TokenId first_filler = static_cast<TokenId>(2 + T);
    const std::size_t fillers = V - first_filler;
    auto draw = [&] {
      const std::size_t len = random_length();
      Example ex;
      ex.tokens.assign(n, kPadToken);
      const auto target = static_cast<TokenId>(2 + rng.below(T));
      ex.tokens[0] = target;
      for (std::size_t j = 1; j < len; ++j) ex.tokens[j] = static_cast<TokenId>(first_filler + rng.below(fillers));
      ex.label = static_cast<std::size_t>(task.token_class[target]);
      return ex;
    };
    task.train = fill_split(sizes.train, C, draw, seen);
    task.dev = fill_split(sizes.dev, C, draw, seen);
  } else {
    task.num_classes = 2;
    task.rule = "label = 1 iff token " + std::to_string(kMarkerToken) + " occurs in the sequence";
    std::vector<TokenId> fillers;
    for (std::size_t v = 2; v < V; ++v) {
      if (v != kMarkerToken) fillers.push_back(static_cast<TokenId>(v));
    }
    auto draw = [&] {
      const std::size_t len = random_length();
      Example ex;
      ex.tokens.assign(n, kPadToken);
      ex.tokens[0] = kClsToken;
      for (std::size_t j = 1; j < len; ++j) ex.tokens[j] = fillers[rng.below(fillers.size())];
      ex.label = rng.below(2);
      if (ex.label == 1) ex.tokens[1 + rng.below(len - 1)] = kMarkerToken;
      return ex;
    };
    task.train = fill_split(sizes.train, 2, draw, seen);
    task.dev = fill_split(sizes.dev, 2, draw, seen);
  }
  return task;
}

}  // namespace aotp
