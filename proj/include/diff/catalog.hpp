#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace diff {

/// Item universe with m attribute value ids per item. Item id 0 and attribute
/// value id 0 are reserved for padding; real ids are dense from 1.
struct ItemCatalog {
  int n_items = 0;
  int m = 0;
  /// Per attribute, the number of real values (ids 1..size).
  std::vector<int> attr_vocab_sizes;
  /// attrs[item][k]; row 0 is the padding item (all zeros).
  std::vector<std::vector<int>> attrs;

  int attr(int item, int k) const { return attrs[static_cast<std::size_t>(item)][static_cast<std::size_t>(k)]; }
  /// Throws CatalogError on any broken invariant.
  void validate() const;
  bool operator==(const ItemCatalog&) const = default;
};

/// One (input sequence → next item) example. `items` is chronological.
struct SequenceExample {
  int user = 0;
  std::vector<int> items;
  int target = 0;
  /// Length of the user's full interaction sequence (cohort analysis).
  int full_length = 0;

  bool operator==(const SequenceExample&) const = default;
};

/// Left-padded fixed-length batch. All per-position arrays are row-major [b×N].
struct SequenceBatch {
  int batch = 0;
  int max_len = 0;
  std::vector<int> item_ids;
  /// attr_ids[k] is [b×N] for attribute k.
  std::vector<std::vector<int>> attr_ids;
  std::vector<std::uint8_t> valid;
  std::vector<int> last_index;
  std::vector<int> target;

  std::size_t at(int row, int pos) const {
    return static_cast<std::size_t>(row) * static_cast<std::size_t>(max_len) + static_cast<std::size_t>(pos);
  }
  bool is_valid(int row, int pos) const { return valid[at(row, pos)] != 0; }
  /// Reconstructs the unpadded input sequence of one row.
  std::vector<int> sequence(int row) const;
};

/// Builds a batch; inputs longer than max_len keep their most recent items.
SequenceBatch make_batch(std::span<const SequenceExample> examples, const ItemCatalog& catalog, int max_len);

}  // namespace diff
