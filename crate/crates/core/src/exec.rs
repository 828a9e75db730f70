//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it (or with [`Execution::Sequential`]) items run in order on the
//! calling thread. Results are always returned in input order.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn map<T, R, F>(self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.into_par_iter().map(f).collect()
            }
            _ => items.into_iter().map(f).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let items: Vec<u64> = (0..200).collect();
        let par = Execution::Parallel.map(items.clone(), |x| x * x);
        let seq = Execution::Sequential.map(items, |x| x * x);
        assert_eq!(par, seq);
    }
}
