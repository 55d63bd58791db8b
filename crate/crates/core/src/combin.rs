//! Small combinatorial helpers.

/// Binomial coefficient as `f64`; zero when `k > n`. Exact while the value fits in 53 bits.
pub fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut c = 1.0f64;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c.round_if_small()
}

/// Binomial with a signed upper argument: zero for negative `n`.
pub fn binom_i(n: i64, k: i64) -> f64 {
    if n < 0 || k < 0 || k > n {
        0.0
    } else {
        binom(n as usize, k as usize)
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |a, i| a * i as f64)
}

/// Multinomial `(a+b+c)! / (a! b! c!)` with total `n`; zero if the parts do not sum to `n`
/// or any part is negative.
pub fn multinomial3(n: i64, a: i64, b: i64, c: i64) -> f64 {
    if a < 0 || b < 0 || c < 0 || a + b + c != n {
        return 0.0;
    }
    binom_i(n, a) * binom_i(n - a, b)
}

trait RoundSmall {
    fn round_if_small(self) -> Self;
}

impl RoundSmall for f64 {
    fn round_if_small(self) -> f64 {
        if self < 9.0e15 {
            self.round()
        } else {
            self
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// All subsets of `items` (as vectors, in bitmask order).
pub fn subsets<T: Clone>(items: &[T]) -> Vec<Vec<T>> {
    let n = items.len();
    (0u64..(1u64 << n)).map(|mask| (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| items[i].clone()).collect()).collect()
}

/// All permutations of `0..k`.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Calls `f` on every multi-index in `[0, size)^order`, last coordinate fastest.
pub fn for_each_index(order: usize, size: usize, mut f: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; order];
    if order == 0 {
        f(&idx);
        return;
    }
    if size == 0 {
        return;
    }
    loop {
        f(&idx);
        let mut i = order;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < size {
                break;
            }
            idx[i] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials() {
        assert_eq!(binom(5, 2), 10.0);
        assert_eq!(binom(2, 5), 0.0);
        assert_eq!(binom(4000, 4), 4000.0 * 3999.0 * 3998.0 * 3997.0 / 24.0);
        assert_eq!(binom_i(-1, 0), 0.0);
        assert_eq!(multinomial3(2, 0, 1, 1), 2.0);
        assert_eq!(multinomial3(4, 2, 1, 1), 12.0);
    }

    #[test]
    fn enumerations() {
        assert_eq!(combinations(5, 3).len(), 10);
        assert_eq!(combinations(3, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(subsets(&[1, 2, 3]).len(), 8);
        assert_eq!(permutations(4).len(), 24);
        let mut c = 0;
        for_each_index(3, 4, |_| c += 1);
        assert_eq!(c, 64);
        let mut c0 = 0;
        for_each_index(0, 4, |_| c0 += 1);
        assert_eq!(c0, 1);
    }
}
