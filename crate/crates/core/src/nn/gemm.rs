/// `C = A·B + beta·C` for row/column-strided `f32` matrices.
///
/// `A` is `m × k`, `B` is `k × n`, `C` is `m × n`. Strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "sgemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "sgemm: B out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "sgemm: C out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposed_operand() {
        // A: 2x3 row-major, B^T stored row-major as 2x3 so B is 3x2.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [1.0f32; 4];
        sgemm(2, 3, 2, &a, (3, 1), &bt, (1, 3), 1.0, &mut c, (2, 1));
        // row0: [1,2,3]·[7,8,9]=50, ·[10,11,12]=68
        assert_eq!(c, [51.0, 69.0, 123.0, 168.0]);
    }
}
