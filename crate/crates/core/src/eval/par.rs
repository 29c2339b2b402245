//! Parallel list combinators with full joining of results.

use super::{current_group, first_error, Failure, Future, ProgramError, Res, Scheduler, TaskGroup};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

fn chunk_len(len: usize, workers: usize) -> usize {
    len.div_ceil(4 * workers.max(1)).max(1)
}

fn sub_group() -> TaskGroup {
    match current_group() {
        Some(g) => g.new_child(),
        None => TaskGroup::new_root(),
    }
}

/// Joins all futures; the lowest-serial program error wins over interrupts.
fn join_all<T: Clone + Send + 'static>(futures: &[Future<T>]) -> Result<Vec<T>, Failure> {
    let mut values = Vec::with_capacity(futures.len());
    let mut errors: Vec<ProgramError> = Vec::new();
    let mut interrupted = false;
    for f in futures {
        match f.join() {
            Ok(v) => values.push(v),
            Err(Failure::Program(e)) => errors.push(e),
            Err(Failure::Interrupt) => interrupted = true,
        }
    }
    if let Some(e) = first_error(&errors) {
        return Err(Failure::Program(e.clone()));
    }
    if interrupted {
        return Err(Failure::Interrupt);
    }
    Ok(values)
}

/// Maps `f` over `xs` in parallel. Equals the sequential map on success;
/// on failure, re-raises the program error with the smallest serial after
/// all forked work has been joined.
pub fn parallel_map<A, B, F>(scheduler: &Scheduler, f: F, xs: Vec<A>) -> Res<Vec<B>>
where
    A: Send + 'static,
    B: Clone + Send + 'static,
    F: Fn(A) -> Res<B> + Send + Sync + 'static,
{
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let group = sub_group();
    let f = Arc::new(f);
    let size = chunk_len(xs.len(), scheduler.workers());
    let mut chunks: Vec<Vec<A>> = Vec::new();
    let mut iter = xs.into_iter().peekable();
    while iter.peek().is_some() {
        chunks.push(iter.by_ref().take(size).collect());
    }
    let futures: Vec<Future<Vec<B>>> = chunks
        .into_iter()
        .map(|chunk| {
            let f = f.clone();
            scheduler.fork(&group, 0, move || {
                chunk
                    .into_iter()
                    .map(|x| {
                        super::checkpoint()?;
                        f(x)
                    })
                    .collect()
            })
        })
        .collect();
    Ok(join_all(&futures)?.into_iter().flatten().collect())
}

/// Parallel existential test. Finding a witness cancels the remaining
/// work; the answer equals the sequential one.
pub fn parallel_exists<A, P>(scheduler: &Scheduler, p: P, xs: Vec<A>) -> Res<bool>
where
    A: Send + 'static,
    P: Fn(&A) -> Res<bool> + Send + Sync + 'static,
{
    if xs.is_empty() {
        return Ok(false);
    }
    let group = sub_group();
    let found = Arc::new(AtomicBool::new(false));
    let p = Arc::new(p);
    let size = chunk_len(xs.len(), scheduler.workers());
    let mut chunks: Vec<Vec<A>> = Vec::new();
    let mut iter = xs.into_iter().peekable();
    while iter.peek().is_some() {
        chunks.push(iter.by_ref().take(size).collect());
    }
    let futures: Vec<Future<()>> = chunks
        .into_iter()
        .map(|chunk| {
            let (p, found, group) = (p.clone(), found.clone(), group.clone());
            scheduler.fork(&group.clone(), 0, move || {
                for x in &chunk {
                    super::checkpoint()?;
                    if p(x)? {
                        found.store(true, Ordering::SeqCst);
                        group.cancel();
                        return Err(Failure::Interrupt);
                    }
                }
                Ok(())
            })
        })
        .collect();
    let joined = join_all(&futures);
    if found.load(Ordering::SeqCst) {
        return Ok(true);
    }
    joined.map(|_| false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{with_group, ProgramError};
    use parking_lot::Mutex;
    use proptest::prelude::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn map_empty() {
        let s = Scheduler::with_workers(2);
        assert_eq!(parallel_map(&s, |x: i32| Ok(x + 1), vec![]), Ok(vec![]));
    }

    #[test]
    fn map_matches_sequential() {
        let s = Scheduler::with_workers(4);
        let xs: Vec<i64> = (1..=100).collect();
        let expected: Vec<i64> = xs.iter().map(|x| x + 1).collect();
        assert_eq!(parallel_map(&s, |x| Ok(x + 1), xs), Ok(expected));
    }

    #[test]
    fn exists_cancels_early() {
        let s = Scheduler::with_workers(4);
        let visits = Arc::new(AtomicUsize::new(0));
        let v = visits.clone();
        let n = 1_000_000;
        let found = parallel_exists(
            &s,
            move |x: &u32| {
                v.fetch_add(1, Ordering::Relaxed);
                Ok(*x == 7)
            },
            (1..=n).collect(),
        );
        assert_eq!(found, Ok(true));
        assert!(visits.load(Ordering::Relaxed) < n as usize);
    }

    #[test]
    fn exists_false_visits_everything() {
        let s = Scheduler::with_workers(3);
        assert_eq!(parallel_exists(&s, |x: &u32| Ok(*x > 500), (0..500).collect()), Ok(false));
    }

    #[test]
    fn cancelling_the_caller_interrupts_the_map() {
        let s = Scheduler::with_workers(2);
        let g = TaskGroup::new_root();
        g.cancel();
        let r = with_group(&g, || parallel_map(&s, |x: i32| Ok(x), vec![1, 2, 3]));
        assert_eq!(r, Err(Failure::Interrupt));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn map_equals_sequential_map(xs in proptest::collection::vec(-50i64..50, 0..60)) {
            let s = Scheduler::with_workers(3);
            let raised: Arc<Mutex<Vec<ProgramError>>> = Arc::default();
            let r2 = raised.clone();
            let f = move |x: i64| {
                if x % 7 == 0 && x != 0 {
                    let e = ProgramError::new(format!("bad {x}"));
                    r2.lock().push(e.clone());
                    Err(Failure::Program(e))
                } else {
                    Ok(x * 3)
                }
            };
            let sequential: Result<Vec<i64>, ()> = xs
                .iter()
                .map(|&x| if x % 7 == 0 && x != 0 { Err(()) } else { Ok(x * 3) })
                .collect();
            match (parallel_map(&s, f, xs.clone()), sequential) {
                (Ok(par), Ok(seq)) => prop_assert_eq!(par, seq),
                (Err(Failure::Program(e)), Err(())) => {
                    let raised = raised.lock();
                    let min = raised.iter().map(|e| e.serial).min().unwrap();
                    prop_assert_eq!(e.serial, min);
                }
                (par, seq) => prop_assert!(false, "parallel {:?} vs sequential {:?}", par, seq),
            }
        }
    }
}
