#pragma once

// Scalar type selection. The library is compiled twice: once in single
// precision for training and once with ETT_DOUBLE_PRECISION for gradient
// checking. Each build lives in its own inline namespace so both can be
// linked into one binary.

#if defined(ETT_DOUBLE_PRECISION)
#define ETT_PRECISION_NS f64
#else
#define ETT_PRECISION_NS f32
#endif

#include <cstddef>
#include <new>
#include <vector>

#define ETT_NAMESPACE_BEGIN \
    namespace ett {         \
    inline namespace ETT_PRECISION_NS {
#define ETT_NAMESPACE_END \
    }                     \
    }

ETT_NAMESPACE_BEGIN

#if defined(ETT_DOUBLE_PRECISION)
using Real = double;
inline constexpr const char* kPrecisionName = "f64";
#else
using Real = float;
inline constexpr const char* kPrecisionName = "f32";
#endif

// Numeric storage starts on a 64-byte boundary. Vectorized reductions peel
// according to the address, so unaligned buffers would make summation order
// (and float results) vary between otherwise identical runs.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<Real, AlignedAllocator<Real>>;

ETT_NAMESPACE_END
