use metaadapt_autodiff::GraphError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid task distribution: {0}")]
    InvalidDistribution(String),
    #[error("episode already finished at step {0}")]
    EpisodeFinished(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite {what} at iteration {iteration}, task {task}")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        task: usize,
    },
    #[error("training aborted at iteration {iteration}, task {task}: {source}")]
    TaskFailed {
        iteration: usize,
        task: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("enumeration would produce {0} outcomes (limit 1000000)")]
    TooManyOutcomes(u128),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
