#pragma once

#include <algorithm>
#include <vector>

#include "sfuda/errors.hpp"
#include "sfuda/tensor.hpp"

namespace sfuda {

// Fixed-capacity FIFO store of (embedding, posterior snapshot) pairs.
// Stored values are plain copies; nothing written here participates in any
// gradient. Slot indices are logical insertion-order positions, 0 = oldest.
template <typename S>
class MemoryQueue {
public:
    MemoryQueue(int capacity, int embed_dim, int num_classes)
        : capacity_(capacity), embed_dim_(embed_dim), num_classes_(num_classes) {
        if (capacity < 1) throw ConfigError("memory queue: capacity must be >= 1");
    }

    int capacity() const { return capacity_; }
    int size() const { return static_cast<int>(embeddings_.size()); }
    int embed_dim() const { return embed_dim_; }
    int num_classes() const { return num_classes_; }

    void push(const VectorX<S>& embedding, const VectorX<S>& posterior) {
        if (embedding.size() != embed_dim_ || posterior.size() != num_classes_)
            throw InputError("memory queue: dimension mismatch on push");
        if (size() < capacity_) {
            embeddings_.push_back(embedding);
            posteriors_.push_back(posterior);
        } else {
            embeddings_[static_cast<std::size_t>(write_cursor_)] = embedding;
            posteriors_[static_cast<std::size_t>(write_cursor_)] = posterior;
            write_cursor_ = (write_cursor_ + 1) % capacity_;
        }
    }

    void push_batch(const MatrixX<S>& embeddings, const MatrixX<S>& posteriors) {
        if (embeddings.rows() != posteriors.rows())
            throw InputError("memory queue: batch rows mismatch");
        for (Eigen::Index r = 0; r < embeddings.rows(); ++r)
            push(embeddings.row(r).transpose(), posteriors.row(r).transpose());
    }

    // Oldest-first logical indexing.
    const VectorX<S>& embedding(int slot) const {
        return embeddings_[static_cast<std::size_t>(physical(slot))];
    }
    const VectorX<S>& posterior(int slot) const {
        return posteriors_[static_cast<std::size_t>(physical(slot))];
    }

private:
    int physical(int slot) const {
        if (slot < 0 || slot >= size()) throw InputError("memory queue: slot out of range");
        if (size() < capacity_) return slot;
        return (write_cursor_ + slot) % capacity_;
    }

    int capacity_;
    int embed_dim_;
    int num_classes_;
    int write_cursor_{0};
    std::vector<VectorX<S>> embeddings_;
    std::vector<VectorX<S>> posteriors_;
};

struct NeighborSet {
    std::vector<int> nn_indices;  // nearest first
    std::vector<int> fn_indices;  // furthest first
};

// Exact neighbor search by Euclidean distance. Slots are ordered by
// (distance, slot index) ascending; the nearest set is the prefix and the
// furthest set the suffix of that one ordering, which keeps the two sets
// disjoint whenever the queue holds at least 2z entries.
template <typename S>
NeighborSet find_neighbors(const VectorX<S>& query, const MemoryQueue<S>& queue, int z) {
    if (z < 1) throw ConfigError("find_neighbors: z must be >= 1");
    const int n = queue.size();
    if (n < 2 * z)
        throw StateError("find_neighbors: queue holds " + std::to_string(n) + " entries but 2*z = " +
                         std::to_string(2 * z) + " are required; warm the queue up first");
    std::vector<std::pair<S, int>> order;
    order.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        order.emplace_back(static_cast<S>((queue.embedding(i) - query).norm()), i);
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
    });
    NeighborSet out;
    for (int i = 0; i < z; ++i) out.nn_indices.push_back(order[static_cast<std::size_t>(i)].second);
    for (int i = 0; i < z; ++i) out.fn_indices.push_back(order[static_cast<std::size_t>(n - 1 - i)].second);
    return out;
}

}  // namespace sfuda
