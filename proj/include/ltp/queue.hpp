#pragma once

#include "ltp/common.hpp"
#include "ltp/tensor.hpp"

namespace ltp {

// Fixed-capacity FIFO dictionary of unit-norm negative embeddings. Once full
// it stays full; enqueueing B rows evicts exactly the B oldest. Snapshots are
// detached copies, oldest row first.
class EmbeddingQueue {
public:
    EmbeddingQueue(int capacity, int dim)
        : capacity_(capacity), dim_(dim), buf_({capacity, dim}) {
        if (capacity < 1 || dim < 1) throw ContractError("queue needs capacity >= 1 and dim >= 1");
    }

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int fill() const { return fill_; }

    void enqueue(const Tensor& batch);
    Tensor snapshot() const;

    // checkpoint support
    const Tensor& buffer() const { return buf_; }
    int cursor() const { return cursor_; }
    void restore(Tensor buffer, int cursor, int fill);

private:
    int capacity_ = 0, dim_ = 0;
    int cursor_ = 0;  // next write slot; when full, also the oldest row
    int fill_ = 0;
    Tensor buf_;
};

}  // namespace ltp
