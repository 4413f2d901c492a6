#pragma once

// Process-level allocator tuning. Training allocates and frees many multi-megabyte
// buffers per step; keeping them on the heap instead of fresh mmap regions avoids
// repeated page faults.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ivcxr {

inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace ivcxr
