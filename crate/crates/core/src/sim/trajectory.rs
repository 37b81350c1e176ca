use std::io::Write;

use serde::Serialize;

use super::{SimError, World};

#[derive(Debug, Serialize)]
struct Row {
    time: f64,
    id: u64,
    lane: usize,
    pos: f64,
    speed: f64,
}

/// Per-step vehicle dump as CSV with columns `time,id,lane,pos,speed`.
pub struct TrajectoryWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W) -> Self {
        TrajectoryWriter { out: csv::Writer::from_writer(out) }
    }

    pub fn record(&mut self, world: &World) -> Result<(), SimError> {
        for v in world.vehicles() {
            self.out.serialize(Row { time: world.time(), id: v.id, lane: v.lane(), pos: v.s, speed: v.v })?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, SimError> {
        self.out.flush()?;
        self.out.into_inner().map_err(|e| SimError::Io(e.into_error()))
    }
}
