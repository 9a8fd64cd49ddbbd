#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace gateway {

/// Fixed-capacity FIFO that overwrites its oldest element when full.
template <typename T>
class RingBuffer {
public:
    explicit RingBuffer(std::size_t capacity) : slots_(capacity)
    {
        if (capacity == 0)
            throw std::invalid_argument("RingBuffer capacity must be positive");
    }

    void push(T value)
    {
        slots_[(head_ + size_) % slots_.size()] = std::move(value);
        if (size_ < slots_.size())
            ++size_;
        else
            head_ = (head_ + 1) % slots_.size();
    }

    std::size_t size() const { return size_; }
    std::size_t capacity() const { return slots_.size(); }
    bool empty() const { return size_ == 0; }

    /// i = 0 is the oldest element.
    const T& operator[](std::size_t i) const { return slots_[(head_ + i) % slots_.size()]; }
    const T& back() const { return (*this)[size_ - 1]; }

    template <typename Pred>
    std::vector<T> collect(Pred&& keep) const
    {
        std::vector<T> out;
        for (std::size_t i = 0; i < size_; ++i) {
            const T& v = (*this)[i];
            if (keep(v))
                out.push_back(v);
        }
        return out;
    }

private:
    std::vector<T> slots_;
    std::size_t head_ = 0;
    std::size_t size_ = 0;
};

} // namespace gateway
