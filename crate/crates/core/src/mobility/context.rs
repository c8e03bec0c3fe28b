use super::Trajectory;

/// Seven day-of-week bits followed by weekday/weekend bits.
pub const CONTEXT_DIM: usize = 9;

/// Day of week for a day index; 0 is Monday.
pub fn day_of_week(day: u32) -> usize {
    (day % 7) as usize
}

pub fn is_weekend(day: u32) -> bool {
    day_of_week(day) >= 5
}

/// One-hot day-of-week and one-hot weekday/weekend for a trajectory.
pub fn context_features(t: &Trajectory) -> [f64; CONTEXT_DIM] {
    let mut c = [0.0; CONTEXT_DIM];
    c[day_of_week(t.day)] = 1.0;
    c[if is_weekend(t.day) { 8 } else { 7 }] = 1.0;
    c
}
