//! Domain types shared by every estimator, plus CSV ingestion.

mod csv_io;
mod types;

pub use csv_io::{load_census_csv, load_survey_csv, write_census_csv, write_survey_csv, CensusSchema, SurveySchema};
pub use types::{AreaSample, CensusArea, CensusFrame, CensusUnits, SurveySample};

