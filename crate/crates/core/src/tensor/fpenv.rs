//! Scoped flush-to-zero for the hot f32 paths. Subnormal activations and
//! gradients appear once a model becomes confident and cost a large constant
//! factor on x86; flushing them changes results only below ~1e-38.

/// Sets FTZ and DAZ for the current thread until dropped.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    pub fn enable() -> Self {
        let saved = read_mxcsr();
        write_mxcsr(saved | FTZ_DAZ);
        FlushDenormals { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn enable() -> Self {
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_mxcsr(self.saved);
    }
}

#[cfg(target_arch = "x86_64")]
fn read_mxcsr() -> u32 {
    let mut csr = 0u32;
    // SAFETY: stmxcsr stores the 32-bit control register into `csr`.
    unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack)) };
    csr
}

#[cfg(target_arch = "x86_64")]
fn write_mxcsr(csr: u32) {
    // SAFETY: only rounding/exception-mask bits read back from the register
    // plus FTZ/DAZ are ever written.
    unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly)) };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flushes_inside_scope_only() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        assert!((tiny * half).is_subnormal());
        {
            let _g = FlushDenormals::enable();
            if cfg!(target_arch = "x86_64") {
                assert_eq!(std::hint::black_box(tiny) * std::hint::black_box(half), 0.0);
            }
        }
        assert!((std::hint::black_box(tiny) * std::hint::black_box(half)).is_subnormal());
    }
}
