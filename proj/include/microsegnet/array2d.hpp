#pragma once

#include <cassert>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace microsegnet {

// Dense row-major 2-D array. The one container behind images, masks,
// probability maps and weight maps.
template <typename T>
class Array2D {
public:
    Array2D() = default;
    Array2D(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("Array2D: negative shape");
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(int r, int c) {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }
    const T& operator()(int r, int c) const {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
        return data_[static_cast<std::size_t>(r) * cols_ + c];
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    bool same_shape(const Array2D& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    void fill(T value) { data_.assign(data_.size(), value); }

    friend bool operator==(const Array2D& a, const Array2D& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

}  // namespace microsegnet
