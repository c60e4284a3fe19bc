use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Runs `work` over `items` on at most `max_concurrent` threads.
///
/// Results come back in input order regardless of completion order.
pub fn dispatch<T, R, F>(items: Vec<T>, max_concurrent: usize, work: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    let workers = max_concurrent.max(1).min(n);
    if workers <= 1 {
        return items.into_iter().map(work).collect();
    }
    let queue: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let results: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= n {
                    break;
                }
                let item = queue[idx].lock().expect("queue slot").take().expect("taken once");
                let out = work(item);
                *results[idx].lock().expect("result slot") = Some(out);
            });
        }
    });
    results
        .into_iter()
        .map(|slot| slot.into_inner().expect("result slot").expect("every item ran"))
        .collect()
}
