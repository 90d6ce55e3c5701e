#include "lns/kernels.hpp"

#include <cstdlib>
#include <cstring>

#if defined(__x86_64__) || defined(__i386__)
#include <cpuid.h>
#endif

namespace lns::kern {

// defined in kernels_avx2.cpp (nullptr when not compiled in)
const Ops* avx2_ops_impl();

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    unsigned eax, ebx, ecx, edx;
    if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
    if (!(ebx & bit_AVX2)) return false;
    // OS must save/restore ymm state (XGETBV: xmm|ymm bits)
    if (!__get_cpuid(1, &eax, &ebx, &ecx, &edx)) return false;
    if (!(ecx & bit_OSXSAVE)) return false;
    unsigned int lo, hi;
    __asm__ volatile("xgetbv" : "=a"(lo), "=d"(hi) : "c"(0));
    unsigned long long xcr0 = (static_cast<unsigned long long>(hi) << 32) | lo;
    return (xcr0 & 0x6) == 0x6;
#else
    return false;
#endif
}

const Ops* avx2_ops() {
    static const Ops* p = cpu_has_avx2() ? avx2_ops_impl() : nullptr;
    return p;
}

namespace {

const Ops& select() {
    const char* want = std::getenv("LNS_KERNELS");
    if (want != nullptr) {
        if (std::strcmp(want, "scalar") == 0) return scalar_ops();
        if (std::strcmp(want, "avx2") == 0 && avx2_ops() != nullptr)
            return *avx2_ops();
        // unknown or unusable request: fall through to the default
    }
    if (avx2_ops() != nullptr) return *avx2_ops();
    return scalar_ops();
}

}  // namespace

const Ops& ops() {
    static const Ops& chosen = select();
    return chosen;
}

}  // namespace lns::kern
