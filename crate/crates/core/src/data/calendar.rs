use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Number of sampling slots per day (`N_d`); 288 at a 5-minute rate.
pub fn steps_per_day(step_seconds: u32) -> Result<usize> {
    if step_seconds == 0 || SECONDS_PER_DAY % i64::from(step_seconds) != 0 {
        return Err(Error::Data(format!("step of {step_seconds} s does not divide a day")));
    }
    Ok((SECONDS_PER_DAY / i64::from(step_seconds)) as usize)
}

/// Time-of-day slot and day of week (Monday = 0) of sample `step_index`,
/// in UTC.
pub fn calendar_indices(start_epoch: i64, step_seconds: u32, step_index: usize) -> (usize, usize) {
    let t = start_epoch + step_index as i64 * i64::from(step_seconds);
    let seconds_of_day = t.rem_euclid(SECONDS_PER_DAY);
    let tod = (seconds_of_day / i64::from(step_seconds)) as usize;
    // 1970-01-01 was a Thursday
    let dow = (t.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7) as usize;
    (tod, dow)
}
