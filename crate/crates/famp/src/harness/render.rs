//! SVG artifacts: option-usage maps over trajectories and per-option
//! termination/action maps. Pure functions of their inputs — identical
//! inputs give identical bytes.

use crate::autodiff::Tape;
use crate::envs::{Action, TaxiMap, TaxiTask};
use crate::error::Result;
use crate::iopg::{responsibilities, FilterCache, Trajectory};
use crate::policy::{ParamValues, TerminationMode};
use std::fmt::Write;

const CELL: usize = 40;
const PAD: usize = 12;
const PANEL_GAP: usize = 24;

/// Option colors; supports up to 16 options.
pub const OPTION_COLORS: [&str; 16] = [
    "#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c",
    "#fabebe", "#008080", "#e6beff", "#9a6324", "#fffac8", "#800000", "#aaffc3", "#808000",
];

fn panel_origin(panel: usize, map: &TaxiMap) -> (usize, usize) {
    let w = map.width as usize * CELL;
    (PAD + panel * (w + PANEL_GAP), PAD + 14)
}

fn grid_lines(svg: &mut String, map: &TaxiMap, ox: usize, oy: usize) {
    let w = map.width as usize * CELL;
    let h = map.height as usize * CELL;
    for r in 0..=map.height as usize {
        let _ = writeln!(
            svg,
            r##"<line x1="{ox}" y1="{}" x2="{}" y2="{}" stroke="#cccccc" stroke-width="1"/>"##,
            oy + r * CELL,
            ox + w,
            oy + r * CELL
        );
    }
    for c in 0..=map.width as usize {
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{oy}" x2="{}" y2="{}" stroke="#cccccc" stroke-width="1"/>"##,
            ox + c * CELL,
            ox + c * CELL,
            oy + h
        );
    }
    // interior walls (between horizontal neighbours) and the border
    for wall in &map.walls {
        let x = ox + (wall.col as usize + 1) * CELL;
        let y = oy + wall.row as usize * CELL;
        let _ = writeln!(
            svg,
            r##"<line x1="{x}" y1="{y}" x2="{x}" y2="{}" stroke="#000000" stroke-width="4"/>"##,
            y + CELL
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{ox}" y="{oy}" width="{w}" height="{h}" fill="none" stroke="#000000" stroke-width="3"/>"##
    );
}

fn specials(svg: &mut String, map: &TaxiMap, ox: usize, oy: usize) {
    for (i, cell) in map.specials.iter().enumerate() {
        let x = ox + cell.col as usize * CELL + 1;
        let y = oy + cell.row as usize * CELL + 1;
        let tint = ["#ffe5e5", "#e5ffe5", "#ffffe0", "#e5e5ff"][i % 4];
        let _ = writeln!(
            svg,
            r##"<rect x="{x}" y="{y}" width="{}" height="{}" fill="{tint}"/>"##,
            CELL - 2,
            CELL - 2
        );
    }
}

fn svg_open(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"12\">\n"
    )
}

fn glyph_text(svg: &mut String, ox: usize, oy: usize, cell_col: usize, cell_row: usize, glyph: &str, color: &str) {
    let x = ox + cell_col * CELL + CELL / 2;
    let y = oy + cell_row * CELL + CELL / 2 + 5;
    let _ = writeln!(
        svg,
        r##"<text x="{x}" y="{y}" text-anchor="middle" fill="{color}" font-size="20">{glyph}</text>"##
    );
}

/// Option-usage map: one panel per carrying-flag value; each visited cell
/// shows the taken action's glyph colored by the most responsible option at
/// that step (argmax of the responsibility row; later visits win).
pub fn render_option_map(
    map: &TaxiMap,
    params: &ParamValues,
    task: &TaxiTask,
    trajs: &[Trajectory],
    mode: TerminationMode,
) -> Result<String> {
    let n_cells = map.n_cells();
    // (glyph, option) per encoded state index
    let mut marks: Vec<Option<(usize, usize)>> = vec![None; 2 * n_cells];
    let mut tape = Tape::new();
    let nodes = params.to_nodes(&mut tape)?;
    let mut cache = FilterCache::new(2 * n_cells, params.n, params.a);
    for traj in trajs {
        let table = responsibilities(&mut tape, &nodes, &mut cache, traj, mode)?;
        let probs = tape.values(table.probs).to_vec();
        for t in 0..traj.len() {
            let row = &probs[t * params.n..(t + 1) * params.n];
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite responsibilities"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            marks[traj.state_idx[t] as usize] = Some((traj.actions[t] as usize, best));
        }
    }

    let panel_w = map.width as usize * CELL;
    let width = 2 * panel_w + PANEL_GAP + 2 * PAD;
    let height = map.height as usize * CELL + 2 * PAD + 14 + 22 + 16 * params.n.min(16);
    let mut svg = svg_open(width, height);
    for (panel, label) in ["without passenger", "with passenger"].iter().enumerate() {
        let (ox, oy) = panel_origin(panel, map);
        let _ = writeln!(
            svg,
            r##"<text x="{ox}" y="{}" fill="#000000">task {} | {label}</text>"##,
            oy - 4,
            task.id
        );
        specials(&mut svg, map, ox, oy);
        grid_lines(&mut svg, map, ox, oy);
        for row in 0..map.height as usize {
            for col in 0..map.width as usize {
                let cell_idx = row * map.width as usize + col;
                let s_idx = panel * n_cells + cell_idx;
                if let Some((action, option)) = marks[s_idx] {
                    let glyph = Action::from_id(action)?.glyph();
                    let color = OPTION_COLORS[option % OPTION_COLORS.len()];
                    glyph_text(&mut svg, ox, oy, col, row, glyph, color);
                }
            }
        }
    }
    // legend: exactly N colors
    let legend_y = map.height as usize * CELL + PAD + 14 + 18;
    for option in 0..params.n {
        let y = legend_y + option * 16;
        let color = OPTION_COLORS[option % OPTION_COLORS.len()];
        let _ = writeln!(
            svg,
            r##"<rect x="{PAD}" y="{y}" width="12" height="12" fill="{color}"/><text x="{}" y="{}" fill="#000000">option {option}</text>"##,
            PAD + 18,
            y + 10
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn gray_of(p: f64) -> String {
    let level = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{level:02x}{level:02x}{level:02x}")
}

/// Per-option artifacts: a termination-probability heatmap over
/// (cell, carrying) on a 0–1 gray scale, next to the argmax-action glyph
/// map of that option's sub-policy. Returns `(file_name, svg)` pairs, one
/// per option.
pub fn render_term_maps(map: &TaxiMap, params: &ParamValues) -> Result<Vec<(String, String)>> {
    let n_cells = map.n_cells();
    let mut out = Vec::with_capacity(params.n);
    for option in 0..params.n {
        let panel_w = map.width as usize * CELL;
        let width = 4 * panel_w + 3 * PANEL_GAP + 2 * PAD;
        let height = map.height as usize * CELL + 2 * PAD + 14 + 20;
        let mut svg = svg_open(width, height);
        let labels = [
            "termination | no passenger",
            "termination | passenger",
            "argmax action | no passenger",
            "argmax action | passenger",
        ];
        for (panel, label) in labels.iter().enumerate() {
            let (ox, oy) = panel_origin(panel, map);
            let _ = writeln!(svg, r##"<text x="{ox}" y="{}" fill="#000000">{label}</text>"##, oy - 4);
            let carrying = panel % 2;
            if panel < 2 {
                for row in 0..map.height as usize {
                    for col in 0..map.width as usize {
                        let s_idx = carrying * n_cells + row * map.width as usize + col;
                        let p = params.term_prob(option, s_idx);
                        let _ = writeln!(
                            svg,
                            r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{}"/>"##,
                            ox + col * CELL,
                            oy + row * CELL,
                            gray_of(p)
                        );
                    }
                }
                grid_lines(&mut svg, map, ox, oy);
            } else {
                specials(&mut svg, map, ox, oy);
                grid_lines(&mut svg, map, ox, oy);
                for row in 0..map.height as usize {
                    for col in 0..map.width as usize {
                        let s_idx = carrying * n_cells + row * map.width as usize + col;
                        let probs = params.action_probs(option, s_idx);
                        let best = probs
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                            .map(|(i, _)| i)
                            .unwrap_or(0);
                        let glyph = Action::from_id(best)?.glyph();
                        glyph_text(&mut svg, ox, oy, col, row, glyph, "#333333");
                    }
                }
            }
        }
        let _ = writeln!(
            svg,
            r##"<text x="{PAD}" y="{}" fill="#000000">option {option} | scale: black=0 white=1</text>"##,
            map.height as usize * CELL + PAD + 14 + 16
        );
        svg.push_str("</svg>\n");
        out.push((format!("term_option{option}.svg"), svg));
    }
    Ok(out)
}
