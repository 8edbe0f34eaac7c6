#include "ltp/queue.hpp"

#include <cmath>

namespace ltp {

void EmbeddingQueue::enqueue(const Tensor& batch) {
    if (batch.dim() != 2 || batch.size(1) != dim_)
        throw ContractError("enqueue expects {B," + std::to_string(dim_) + "}, got " + batch.shape_str());
    int b = batch.size(0);
    if (b > capacity_)
        throw ContractError("batch of " + std::to_string(b) + " exceeds queue capacity " +
                            std::to_string(capacity_));
    for (int r = 0; r < b; ++r) {
        double n = 0;
        for (int j = 0; j < dim_; ++j) {
            double v = batch[static_cast<int64_t>(r) * dim_ + j];
            n += v * v;
        }
        if (std::abs(std::sqrt(n) - 1.0) > 1e-6)
            throw ContractError("enqueued embedding row " + std::to_string(r) + " is not unit-norm");
    }
    for (int r = 0; r < b; ++r) {
        for (int j = 0; j < dim_; ++j)
            buf_[static_cast<int64_t>(cursor_) * dim_ + j] = batch[static_cast<int64_t>(r) * dim_ + j];
        cursor_ = (cursor_ + 1) % capacity_;
    }
    fill_ = std::min(capacity_, fill_ + b);
}

Tensor EmbeddingQueue::snapshot() const {
    Tensor out({fill_, dim_});
    int start = fill_ < capacity_ ? 0 : cursor_;
    for (int r = 0; r < fill_; ++r) {
        int src = (start + r) % capacity_;
        for (int j = 0; j < dim_; ++j)
            out[static_cast<int64_t>(r) * dim_ + j] = buf_[static_cast<int64_t>(src) * dim_ + j];
    }
    return out;
}

void EmbeddingQueue::restore(Tensor buffer, int cursor, int fill) {
    require_shape(buffer, {capacity_, dim_}, "queue buffer");
    if (cursor < 0 || cursor >= capacity_ || fill < 0 || fill > capacity_)
        throw CheckpointError("queue cursor/fill out of range");
    buf_ = std::move(buffer);
    cursor_ = cursor;
    fill_ = fill;
}

}  // namespace ltp
