/* Direct 3x3x3 "same" convolution kernels, instantiated once per scalar type.
 *
 * Expects REAL, VEC, VLEN and FN(name) to be defined by the includer.
 * Input tensors are single-sample, channel-first and C-contiguous. The
 * padded input has one zero voxel of border on each spatial side.
 * Accumulation order is fixed, so results do not depend on anything but
 * the inputs and the compiled vector width. Subnormal inputs and results
 * are flushed to zero while a kernel runs.
 */

static inline VEC FN(ldu)(const REAL* p) { VEC v; memcpy(&v, p, sizeof v); return v; }
static inline void FN(stu)(REAL* p, VEC v) { memcpy(p, &v, sizeof v); }

/* out[co,z,y,x] = bias[co] + sum_{ci,a,b,c} w[co,ci,a,b,c] * xp[ci,z+a,y+b,x+c] */
static void FN(conv3x3x3_forward)(const REAL* xp, const REAL* w, const REAL* bias, REAL* out,
                                  ptrdiff_t cin, ptrdiff_t cout,
                                  ptrdiff_t D, ptrdiff_t H, ptrdiff_t W)
{
    const ptrdiff_t sy = W + 2, sz = (H + 2) * sy, sc = (D + 2) * sz;
    const ptrdiff_t os = D * H * W, ws = cin * 27;
    const unsigned int csr = lacare_ftz_begin();
    for (ptrdiff_t co0 = 0; co0 < cout; co0 += LACARE_CB) {
        const ptrdiff_t nco = cout - co0 < LACARE_CB ? cout - co0 : LACARE_CB;
        for (ptrdiff_t z = 0; z < D; z++)
        for (ptrdiff_t y = 0; y < H; y++) {
            ptrdiff_t x0 = 0;
            if (nco == LACARE_CB) {
                for (; x0 + VLEN <= W; x0 += VLEN) {
                    VEC a0 = {0}, a1 = {0}, a2 = {0}, a3 = {0}, a4 = {0}, a5 = {0}, a6 = {0}, a7 = {0};
                    a0 += bias[co0];     a1 += bias[co0 + 1]; a2 += bias[co0 + 2]; a3 += bias[co0 + 3];
                    a4 += bias[co0 + 4]; a5 += bias[co0 + 5]; a6 += bias[co0 + 6]; a7 += bias[co0 + 7];
                    for (ptrdiff_t ci = 0; ci < cin; ci++)
                    for (int a = 0; a < 3; a++)
                    for (int b = 0; b < 3; b++) {
                        const REAL* rr = xp + ci * sc + (z + a) * sz + (y + b) * sy + x0;
                        const REAL* wk = w + (co0 * cin + ci) * 27 + a * 9 + b * 3;
                        for (int c = 0; c < 3; c++) {
                            const VEC r = FN(ldu)(rr + c);
                            a0 += wk[c] * r;          a1 += wk[c + ws] * r;
                            a2 += wk[c + 2 * ws] * r; a3 += wk[c + 3 * ws] * r;
                            a4 += wk[c + 4 * ws] * r; a5 += wk[c + 5 * ws] * r;
                            a6 += wk[c + 6 * ws] * r; a7 += wk[c + 7 * ws] * r;
                        }
                    }
                    REAL* o = out + ((co0 * D + z) * H + y) * W + x0;
                    FN(stu)(o, a0);          FN(stu)(o + os, a1);
                    FN(stu)(o + 2 * os, a2); FN(stu)(o + 3 * os, a3);
                    FN(stu)(o + 4 * os, a4); FN(stu)(o + 5 * os, a5);
                    FN(stu)(o + 6 * os, a6); FN(stu)(o + 7 * os, a7);
                }
            }
            if (x0 < W)
            for (ptrdiff_t k = 0; k < nco; k++)
            for (ptrdiff_t x = x0; x < W; x++) {
                REAL s = bias[co0 + k];
                for (ptrdiff_t ci = 0; ci < cin; ci++)
                for (int a = 0; a < 3; a++)
                for (int b = 0; b < 3; b++)
                for (int c = 0; c < 3; c++)
                    s += w[((co0 + k) * cin + ci) * 27 + a * 9 + b * 3 + c]
                       * xp[ci * sc + (z + a) * sz + (y + b) * sy + x + c];
                out[((co0 + k) * os) + (z * H + y) * W + x] = s;
            }
        }
    }
    lacare_ftz_end(csr);
}

/* dw[co,ci,a,b,c] += sum_{z,y,x} g[co,z,y,x] * xp[ci,z+a,y+b,x+c] */
static int FN(conv3x3x3_grad_weight)(const REAL* xp, const REAL* g, REAL* dw,
                                     ptrdiff_t cin, ptrdiff_t cout,
                                     ptrdiff_t D, ptrdiff_t H, ptrdiff_t W)
{
    const ptrdiff_t sy = W + 2, sz = (H + 2) * sy, sc = (D + 2) * sz;
    const ptrdiff_t nfull = (W / VLEN) * VLEN, gs = D * H * W;
    const ptrdiff_t nacc = LACARE_CB * 3 * cin * 9;
    /* slab of z-planes sized so the gradient block stays cache resident */
    ptrdiff_t zb = 32768 / (H * W);
    if (zb < 1) zb = 1;
    VEC* accbuf = (VEC*) aligned_alloc(sizeof(VEC), sizeof(VEC) * nacc);
    REAL* tailbuf = (REAL*) malloc(sizeof(REAL) * nacc);
    if (!accbuf || !tailbuf) { free(accbuf); free(tailbuf); return -1; }
    const unsigned int csr = lacare_ftz_begin();
    for (ptrdiff_t co0 = 0; co0 < cout; co0 += LACARE_CB) {
        const ptrdiff_t nco = cout - co0 < LACARE_CB ? cout - co0 : LACARE_CB;
        memset(accbuf, 0, sizeof(VEC) * nacc);
        memset(tailbuf, 0, sizeof(REAL) * nacc);
        for (ptrdiff_t z0 = 0; z0 < D; z0 += zb) {
            const ptrdiff_t z1 = z0 + zb < D ? z0 + zb : D;
            for (ptrdiff_t ci = 0; ci < cin; ci++)
            for (int a = 0; a < 3; a++)
            for (int b = 0; b < 3; b++) {
                const ptrdiff_t t = (ci * 9 + a * 3 + b) * LACARE_CB * 3;
                VEC* acc = accbuf + t;
                REAL* tail = tailbuf + t;
                VEC a00 = acc[0],  a01 = acc[1],  a02 = acc[2],  a10 = acc[3],  a11 = acc[4],  a12 = acc[5],
                    a20 = acc[6],  a21 = acc[7],  a22 = acc[8],  a30 = acc[9],  a31 = acc[10], a32 = acc[11],
                    a40 = acc[12], a41 = acc[13], a42 = acc[14], a50 = acc[15], a51 = acc[16], a52 = acc[17],
                    a60 = acc[18], a61 = acc[19], a62 = acc[20], a70 = acc[21], a71 = acc[22], a72 = acc[23];
                for (ptrdiff_t z = z0; z < z1; z++)
                for (ptrdiff_t y = 0; y < H; y++) {
                    const REAL* r = xp + ci * sc + (z + a) * sz + (y + b) * sy;
                    const REAL* gr = g + ((co0 * D + z) * H + y) * W;
                    ptrdiff_t xs = 0;
                    if (nco == LACARE_CB) {
                        for (ptrdiff_t x0 = 0; x0 < nfull; x0 += VLEN) {
                            const VEC r0 = FN(ldu)(r + x0), r1 = FN(ldu)(r + x0 + 1), r2 = FN(ldu)(r + x0 + 2);
                            VEC gk;
                            gk = FN(ldu)(gr + x0);          a00 += gk * r0; a01 += gk * r1; a02 += gk * r2;
                            gk = FN(ldu)(gr + gs + x0);     a10 += gk * r0; a11 += gk * r1; a12 += gk * r2;
                            gk = FN(ldu)(gr + 2 * gs + x0); a20 += gk * r0; a21 += gk * r1; a22 += gk * r2;
                            gk = FN(ldu)(gr + 3 * gs + x0); a30 += gk * r0; a31 += gk * r1; a32 += gk * r2;
                            gk = FN(ldu)(gr + 4 * gs + x0); a40 += gk * r0; a41 += gk * r1; a42 += gk * r2;
                            gk = FN(ldu)(gr + 5 * gs + x0); a50 += gk * r0; a51 += gk * r1; a52 += gk * r2;
                            gk = FN(ldu)(gr + 6 * gs + x0); a60 += gk * r0; a61 += gk * r1; a62 += gk * r2;
                            gk = FN(ldu)(gr + 7 * gs + x0); a70 += gk * r0; a71 += gk * r1; a72 += gk * r2;
                        }
                        xs = nfull;
                    }
                    if (xs < W)
                    for (ptrdiff_t k = 0; k < nco; k++)
                        for (int c = 0; c < 3; c++) {
                            REAL s = 0;
                            for (ptrdiff_t x = xs; x < W; x++)
                                s += gr[k * gs + x] * r[x + c];
                            tail[k * 3 + c] += s;
                        }
                }
                acc[0] = a00;  acc[1] = a01;  acc[2] = a02;  acc[3] = a10;  acc[4] = a11;  acc[5] = a12;
                acc[6] = a20;  acc[7] = a21;  acc[8] = a22;  acc[9] = a30;  acc[10] = a31; acc[11] = a32;
                acc[12] = a40; acc[13] = a41; acc[14] = a42; acc[15] = a50; acc[16] = a51; acc[17] = a52;
                acc[18] = a60; acc[19] = a61; acc[20] = a62; acc[21] = a70; acc[22] = a71; acc[23] = a72;
            }
        }
        for (ptrdiff_t ci = 0; ci < cin; ci++)
        for (int a = 0; a < 3; a++)
        for (int b = 0; b < 3; b++) {
            const ptrdiff_t t = (ci * 9 + a * 3 + b) * LACARE_CB * 3;
            for (ptrdiff_t k = 0; k < nco; k++)
                for (int c = 0; c < 3; c++) {
                    REAL s = tailbuf[t + k * 3 + c];
                    const VEC v = accbuf[t + k * 3 + c];
                    for (int l = 0; l < VLEN; l++) s += v[l];
                    dw[((co0 + k) * cin + ci) * 27 + a * 9 + b * 3 + c] += s;
                }
        }
    }
    lacare_ftz_end(csr);
    free(accbuf);
    free(tailbuf);
    return 0;
}
