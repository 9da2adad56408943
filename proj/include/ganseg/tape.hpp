#pragma once

#include "ganseg/tensor.hpp"

#include <atomic>
#include <functional>
#include <utility>

namespace ganseg {

/// Reverse-mode autodiff tape. Operations recorded during a forward pass form
/// a topologically ordered node list; backward() walks it once in reverse and
/// deposits gradients into every watched leaf. A tape is single-use: after
/// backward() it is consumed and rejects further recording.
///
/// Confined to one logical execution context; never share a live tape between
/// threads.
template <typename S>
class Tape {
  public:
    /// Receives the upstream gradient of the node's output and adds each
    /// input's contribution via grad_accum().
    using BackwardFn = std::function<void(const S* gout, Tape<S>& tape)>;

    Tape() : id_(next_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }
    bool consumed() const { return consumed_; }
    int num_nodes() const { return static_cast<int>(nodes_.size()); }

    /// Registers a leaf parameter. Allocates (and zeroes) its gradient buffer;
    /// after backward() the buffer holds d(loss)/d(leaf), or zero when the
    /// leaf is unreachable from the loss.
    int watch(Tensor<S>& leaf) {
        require_live();
        leaf.ensure_grad();
        leaf.zero_grad();
        int id = add_node(leaf.size(), {}, nullptr);
        leaf.set_node(id, id_);
        leaves_.push_back({id, leaf.grad_storage()});
        return id;
    }

    /// Records an interior operation producing `out_size` values.
    int record(std::int64_t out_size, std::vector<int> inputs, BackwardFn back) {
        require_live();
        return add_node(out_size, std::move(inputs), std::move(back));
    }

    /// Gradient accumulator of a node, zero-initialised on first access.
    S* grad_accum(int node) {
        auto& buf = accum_[node];
        if (buf.empty()) buf.assign(nodes_[node].size, S(0));
        return buf.data();
    }

    bool has_accum(int node) const { return !accum_[node].empty(); }

    /// Runs reverse-mode accumulation from a scalar loss and consumes the
    /// tape. Every watched leaf's grad buffer ends up holding its gradient.
    void backward(const Tensor<S>& loss) {
        require_live();
        if (loss.size() != 1) {
            throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                        loss.shape().str());
        }
        const int root = loss.node_on(id_);
        if (root < 0 || root >= num_nodes()) {
            throw std::invalid_argument("loss tensor was not recorded on this tape");
        }
        grad_accum(root)[0] = S(1);
        for (int i = num_nodes() - 1; i >= 0; --i) {
            if (accum_[i].empty() || !nodes_[i].back) continue;
            nodes_[i].back(accum_[i].data(), *this);
            accum_[i].clear();  // interior gradients are not needed past this point
        }
        for (auto& leaf : leaves_) {
            auto& acc = accum_[leaf.node];
            if (acc.empty()) continue;  // unreachable leaf keeps its zeroed grad
            std::copy(acc.begin(), acc.end(), leaf.grad->begin());
        }
        consumed_ = true;
        nodes_.clear();
        accum_.clear();
        leaves_.clear();
    }

  private:
    struct Node {
        std::vector<int> inputs;
        BackwardFn back;
        std::int64_t size;
    };
    struct Leaf {
        int node;
        std::shared_ptr<std::vector<S>> grad;
    };

    void require_live() const {
        if (consumed_) throw std::runtime_error("tape already consumed by backward()");
    }

    int add_node(std::int64_t size, std::vector<int> inputs, BackwardFn back) {
        nodes_.push_back(Node{std::move(inputs), std::move(back), size});
        accum_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{0};
        return ++counter;
    }

    std::uint64_t id_ = 0;
    std::vector<Node> nodes_;
    std::vector<std::vector<S>> accum_;
    std::vector<Leaf> leaves_;
    bool consumed_ = false;
};

using TapeF = Tape<float>;

}  // namespace ganseg
