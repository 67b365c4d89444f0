use std::collections::BTreeMap;

use super::{extract_planes, PlaneModel, PointCloud, SegmentationConfig, SegmentationError};

/// A strategy that turns a point cloud into candidate planes.
pub trait PlaneExtractor: Send + Sync {
    fn name(&self) -> &'static str;
    fn extract(&self, cloud: &PointCloud) -> Result<Vec<PlaneModel>, SegmentationError>;
}

/// Iterative RANSAC extraction.
#[derive(Debug, Clone)]
pub struct RansacExtractor {
    pub config: SegmentationConfig,
}

impl PlaneExtractor for RansacExtractor {
    fn name(&self) -> &'static str {
        "ransac"
    }

    fn extract(&self, cloud: &PointCloud) -> Result<Vec<PlaneModel>, SegmentationError> {
        extract_planes(cloud, &self.config)
    }
}

pub type PlaneExtractorFactory = fn(&SegmentationConfig) -> Box<dyn PlaneExtractor>;

/// Name → factory table for plane extractors.
pub struct PlaneExtractorRegistry {
    factories: BTreeMap<&'static str, PlaneExtractorFactory>,
}

impl PlaneExtractorRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("ransac", |cfg| Box::new(RansacExtractor { config: cfg.clone() }));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: PlaneExtractorFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, name: &str, cfg: &SegmentationConfig) -> Result<Box<dyn PlaneExtractor>, SegmentationError> {
        let factory = self.factories.get(name).ok_or_else(|| SegmentationError::UnknownExtractor(name.to_string()))?;
        Ok(factory(cfg))
    }
}

impl Default for PlaneExtractorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
