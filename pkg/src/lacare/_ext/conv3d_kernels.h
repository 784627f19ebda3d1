#ifndef LACARE_CONV3D_KERNELS_H
#define LACARE_CONV3D_KERNELS_H

#include <stddef.h>
#include <stdlib.h>
#include <string.h>

/* output channels held in registers per pass */
#define LACARE_CB 8

#if defined(__SSE__)
#include <xmmintrin.h>
/* Subnormal operands slow vector FMAs down by more than an order of
 * magnitude; flush them to zero for the duration of a kernel call. */
static inline unsigned int lacare_ftz_begin(void)
{
    unsigned int old = _mm_getcsr();
    _mm_setcsr(old | 0x8040u);  /* FTZ | DAZ */
    return old;
}
static inline void lacare_ftz_end(unsigned int old) { _mm_setcsr(old); }
#else
static inline unsigned int lacare_ftz_begin(void) { return 0; }
static inline void lacare_ftz_end(unsigned int old) { (void) old; }
#endif

typedef float lacare_vf __attribute__((vector_size(64)));
typedef double lacare_vd __attribute__((vector_size(64)));

#define REAL float
#define VEC lacare_vf
#define VLEN 16
#define FN(name) name##_f32
#include "conv3d_impl.h"
#undef REAL
#undef VEC
#undef VLEN
#undef FN

#define REAL double
#define VEC lacare_vd
#define VLEN 8
#define FN(name) name##_f64
#include "conv3d_impl.h"
#undef REAL
#undef VEC
#undef VLEN
#undef FN

#endif
