#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace osar {

/// Keeps large activation buffers on the heap between training steps instead
/// of returning them to the OS after every tape, which otherwise costs a page
/// fault per touched page on each allocation. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace osar
