//! Running scenarios against a world.

use crate::report::{self, Assertion, TopologyReport};
use crate::scenario::{Action, Scenario};
use crate::world::{World, WorldConfig};
use crate::SimError;

/// A finished run: the report and the world it was taken from.
pub struct Outcome {
    pub report: TopologyReport,
    pub world: World,
}

/// Connector specs naming a network origin run in real-transport mode.
pub fn is_real(spec: &str) -> bool {
    spec.contains("://")
}

pub fn world_for(s: &Scenario) -> Result<World, SimError> {
    let cfg = WorldConfig {
        seed: s.seed,
        latency: s.latency,
        capture: s.capture,
        connector: s.connector.clone(),
    };
    if is_real(&s.connector) {
        World::new_real(cfg)
    } else {
        Ok(World::new(cfg))
    }
}

pub fn run_scenario(s: &Scenario) -> Result<TopologyReport, SimError> {
    Ok(run(s)?.report)
}

pub fn run(s: &Scenario) -> Result<Outcome, SimError> {
    run_in(world_for(s)?, s)
}

/// Runs `s` on a prepared world (extra services, custom config).
pub fn run_in(mut world: World, s: &Scenario) -> Result<Outcome, SimError> {
    s.validate()?;
    let mut assertions = Vec::new();
    for step in s.ordered() {
        world.run_until(step.at);
        if let Some(a) = apply(&mut world, &step.actor, &step.action, step.at)? {
            assertions.push(a);
        }
    }
    world.run_until(s.end_ms);
    let report = report::build(&world, s, assertions);
    Ok(Outcome { report, world })
}

pub fn apply(world: &mut World, actor: &str, action: &Action, at: u64) -> Result<Option<Assertion>, SimError> {
    match action {
        Action::Spawn { connector } => world.spawn(actor, connector.clone())?,
        Action::Publish(req) => {
            world.publish(actor, req.clone())?;
        }
        Action::Subscribe(req) => {
            world.subscribe(actor, req.clone())?;
        }
        Action::Stop { stream } => world.stop(actor, stream.as_deref())?,
        Action::Send { stream, text } => world.send(actor, stream.as_deref(), text)?,
        Action::Pause { stream } => world.set_playing(actor, stream.as_deref(), false)?,
        Action::Resume { stream } => world.set_playing(actor, stream.as_deref(), true)?,
        Action::AddTracks { stream, tracks } => world.add_tracks(actor, stream, tracks)?,
        Action::RemoveTracks { stream, labels } => world.remove_tracks(actor, stream, labels)?,
        Action::DropTransport => world.drop_transport(actor)?,
        Action::Restart { service, down_ms } => world.restart(service, *down_ms)?,
        Action::Expect(e) => return Ok(Some(report::check(world, at, e))),
    }
    Ok(None)
}
