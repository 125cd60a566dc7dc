#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("cannot aggregate an empty outcome list")]
    Empty,
}

/// Most frequent outcome; ties go to whichever tied value appears first.
pub fn majority<T: PartialEq + Clone>(outcomes: &[T]) -> Result<T, AggregateError> {
    let mut best: Option<(usize, usize)> = None;
    for (i, x) in outcomes.iter().enumerate() {
        if outcomes[..i].contains(x) {
            continue;
        }
        let n = outcomes[i..].iter().filter(|y| *y == x).count();
        if best.is_none_or(|(_, bn)| n > bn) {
            best = Some((i, n));
        }
    }
    best.map(|(i, _)| outcomes[i].clone()).ok_or(AggregateError::Empty)
}

/// True iff any chain succeeded.
pub fn pass_at_all(outcomes: &[bool]) -> Result<bool, AggregateError> {
    if outcomes.is_empty() {
        return Err(AggregateError::Empty);
    }
    Ok(outcomes.iter().any(|&b| b))
}
