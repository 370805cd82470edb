use vmsift::config::Config;
use vmsift::mem_model::AccessType;
use vmsift::simulator::{
    ActivityKind, ArrivalProcess, DetectionDelay, EventTag, Select, StepSpec, TemplateSpec,
};

/// Calibrated configuration reduced to one nginx handshake every second.
/// Each handshake reads the key at its start and raises its end event
/// `window_ms` later, with no detection delay and no other guest activity.
pub fn periodic_window(window_ms: f64) -> Config {
    let mut config = Config::calibrated();
    config.workload.process = ArrivalProcess::Periodic;
    config.workload.load_level = 1.0;
    config.workload.web_probability = 1.0;
    config.workload.ssh_probability = 0.0;
    config.workload.nginx_share = 1.0;
    config.workload.disk_flush_period_ms = None;
    config.background.clear();
    let step = |at_ms: f64,
                to_ms: Option<f64>,
                region: Option<&str>,
                pages,
                secret: Option<&str>,
                access| StepSpec {
        at_ms,
        to_ms,
        region: region.map(str::to_owned),
        pages,
        select: region.map(|_| Select::Random),
        secret: secret.map(str::to_owned),
        access,
    };
    config.templates.insert(
        ActivityKind::TlsHandshakeNginx,
        TemplateSpec {
            end_event: EventTag::ChangeCipherSpec,
            end_at_ms: window_ms,
            detection: DetectionDelay::constant(0.0),
            steps: vec![
                step(0.0, None, None, 1, Some("nginx-key"), AccessType::Read),
                step(
                    0.0,
                    Some(window_ms),
                    Some("nginx-conn"),
                    4,
                    None,
                    AccessType::Write,
                ),
            ],
        },
    );
    config.validate().expect("constructed configuration");
    config
}
