//! DRAM command logs of a compiled trace.

use anyhow::Result;
use pimsim_core::compiler::DeviceTrace;
use pimsim_core::config::TimingParams;
use pimsim_core::timesim::channel::{channel_commands, simulate_channel, Event};
use std::io::Write;

/// Issue each channel's command stream of `trace` on its own, earliest legal
/// time first. Device-level stalls (PNM, CXL, instruction decode) are not
/// part of this view.
pub fn channel_events(trace: &DeviceTrace, channels: u8, t: &TimingParams) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for ch in 0..channels {
        let cmds = channel_commands(&trace.instructions, ch);
        if cmds.is_empty() {
            continue;
        }
        out.extend(simulate_channel(&cmds, t)?.events);
    }
    Ok(out)
}

/// CSV with columns time_ns, channel, command, bank, row, col. `bank` is the
/// mask of participating banks.
pub fn write_events(w: impl Write, events: &[Event]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["time_ns", "channel", "command", "bank", "row", "col"])?;
    for e in events {
        w.write_record([
            e.time_ns.to_string(),
            e.channel.to_string(),
            e.command.mnemonic().to_string(),
            format!("{:#06x}", e.bank),
            e.row.to_string(),
            e.col.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
