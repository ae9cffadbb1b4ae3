#include "diff/catalog.hpp"

#include <algorithm>

#include "diff/errors.hpp"

namespace diff {

void ItemCatalog::validate() const {
  if (n_items < 1) throw CatalogError("catalog has no items");
  if (static_cast<int>(attr_vocab_sizes.size()) != m) {
    throw CatalogError("catalog declares m = " + std::to_string(m) + " but " +
                       std::to_string(attr_vocab_sizes.size()) + " vocabularies");
  }
  if (static_cast<int>(attrs.size()) != n_items + 1) {
    throw CatalogError("catalog attribute table has " + std::to_string(attrs.size()) + " rows for " +
                       std::to_string(n_items) + " items");
  }
  for (std::size_t item = 0; item < attrs.size(); ++item) {
    if (static_cast<int>(attrs[item].size()) != m) {
      throw CatalogError("item " + std::to_string(item) + " has " + std::to_string(attrs[item].size()) +
                         " attributes, expected " + std::to_string(m));
    }
    for (int k = 0; k < m; ++k) {
      const int v = attrs[item][static_cast<std::size_t>(k)];
      const bool pad = item == 0;
      if ((pad && v != 0) || (!pad && (v < 1 || v > attr_vocab_sizes[static_cast<std::size_t>(k)]))) {
        throw CatalogError("item " + std::to_string(item) + " attribute " + std::to_string(k) + " value " +
                           std::to_string(v) + " outside vocabulary");
      }
    }
  }
}

std::vector<int> SequenceBatch::sequence(int row) const {
  std::vector<int> out;
  for (int p = 0; p < max_len; ++p) {
    if (is_valid(row, p)) out.push_back(item_ids[at(row, p)]);
  }
  return out;
}

SequenceBatch make_batch(std::span<const SequenceExample> examples, const ItemCatalog& catalog, int max_len) {
  SequenceBatch b;
  b.batch = static_cast<int>(examples.size());
  b.max_len = max_len;
  const std::size_t cells = examples.size() * static_cast<std::size_t>(max_len);
  b.item_ids.assign(cells, 0);
  b.attr_ids.assign(static_cast<std::size_t>(catalog.m), std::vector<int>(cells, 0));
  b.valid.assign(cells, 0);
  b.last_index.assign(examples.size(), max_len - 1);
  b.target.reserve(examples.size());
  for (int row = 0; row < b.batch; ++row) {
    const SequenceExample& ex = examples[static_cast<std::size_t>(row)];
    if (ex.items.empty()) throw EmptySequenceError("example for user " + std::to_string(ex.user) + " is empty");
    const int len = std::min<int>(static_cast<int>(ex.items.size()), max_len);
    const int offset = static_cast<int>(ex.items.size()) - len;
    for (int j = 0; j < len; ++j) {
      const int item = ex.items[static_cast<std::size_t>(offset + j)];
      if (item < 1 || item > catalog.n_items) {
        throw CatalogError("item id " + std::to_string(item) + " outside catalog of " +
                           std::to_string(catalog.n_items));
      }
      const std::size_t cell = b.at(row, max_len - len + j);
      b.item_ids[cell] = item;
      b.valid[cell] = 1;
      for (int k = 0; k < catalog.m; ++k) b.attr_ids[static_cast<std::size_t>(k)][cell] = catalog.attr(item, k);
    }
    if (ex.target < 0 || ex.target > catalog.n_items) {
      throw CatalogError("target id " + std::to_string(ex.target) + " outside catalog");
    }
    b.target.push_back(ex.target);
  }
  return b;
}

}  // namespace diff
