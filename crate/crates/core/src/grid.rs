//! Small 2-D grids shared by the model, saliency and training code.

/// A {0,1}-valued spatial map, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Ground-truth annotation reduced to a block's spatial grid.
pub type LayerAnnotation = BinaryMask;

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(height * width, data.len(), "mask data length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    /// Builds a mask from 0/1 values; anything else yields `Err(index)`.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self, usize> {
        assert_eq!(height * width, values.len(), "mask data length");
        let data = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 1.0 {
                    Ok(true)
                } else if v == 0.0 {
                    Ok(false)
                } else {
                    Err(i)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self::new(height, width, data))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }
}
