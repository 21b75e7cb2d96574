#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <mutex>
#include <optional>
#include <stdexcept>

namespace ew {

/// Fixed-capacity MPMC queue. push() blocks while full, pop() blocks while empty.
/// After close(), push() fails and pop() drains what is left, then returns nullopt.
template <class T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : cap_(capacity) {
        if (capacity == 0) throw std::invalid_argument("BoundedQueue capacity must be > 0");
    }

    bool push(T v) {
        std::unique_lock lk(mu_);
        not_full_.wait(lk, [&] { return closed_ || q_.size() < cap_; });
        if (closed_) return false;
        q_.push_back(std::move(v));
        high_water_ = std::max(high_water_, q_.size());
        not_empty_.notify_one();
        return true;
    }

    std::optional<T> pop() {
        std::unique_lock lk(mu_);
        not_empty_.wait(lk, [&] { return closed_ || !q_.empty(); });
        if (q_.empty()) return std::nullopt;
        T v = std::move(q_.front());
        q_.pop_front();
        not_full_.notify_one();
        return v;
    }

    void close() {
        std::lock_guard lk(mu_);
        closed_ = true;
        not_full_.notify_all();
        not_empty_.notify_all();
    }

    std::size_t size() const {
        std::lock_guard lk(mu_);
        return q_.size();
    }

    std::size_t capacity() const { return cap_; }

    std::size_t high_water() const {
        std::lock_guard lk(mu_);
        return high_water_;
    }

private:
    const std::size_t cap_;
    mutable std::mutex mu_;
    std::condition_variable not_full_, not_empty_;
    std::deque<T> q_;
    std::size_t high_water_ = 0;
    bool closed_ = false;
};

}  // namespace ew
