#pragma once

#include <cstdint>

#include "diff/model.hpp"

namespace diff {

/// Small deterministic setting for gradient and oracle checks: 20 items, two
/// attributes of 5 values, N = 8, d = 8, two heads, one layer, four sequences
/// of mixed lengths (one fills the window, one holds a single item).
struct TinyFixture {
  ItemCatalog catalog;
  std::vector<SequenceExample> examples;
  SequenceBatch batch;
  ModelConfig config;
};

TinyFixture tiny_fixture(std::uint64_t seed = 1);

}  // namespace diff
