//! The discrete-event core: equal-time ordering, cancellation and the JSONL trace.

use fedcompass::sim::{EventQueue, Payload, SimTrace};
use serde_json::json;

fn main() {
    let mut queue = EventQueue::new();
    queue.schedule(5.0, Payload::Evaluate).unwrap();
    let timer = queue.schedule(5.0, Payload::GroupTimer(1)).unwrap();
    queue.schedule(5.0, Payload::GroupTimer(2)).unwrap();
    queue.schedule(2.5, Payload::Evaluate).unwrap();
    queue.cancel(timer);

    let mut trace = SimTrace::new();
    while let Some(event) = queue.pop() {
        trace.set_seq(event.seq);
        trace.push(event.fire_at, event.payload.kind(), json!({}));
    }
    print!("{}", trace.to_jsonl());
    println!("trace hash {}", trace.hash());
}
