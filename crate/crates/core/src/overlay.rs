//! SVG overlays of covariance ellipses on an image.

use std::fmt::Write as _;

use base64::Engine as _;
use nalgebra::{Matrix2, SymmetricEigen};

use crate::energy::ImagePlane;
use crate::error::{Error, Result};
use crate::io::ResultRow;

/// Semi-axes for one standard deviation and the major-axis angle in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseAxes {
    pub major: f64,
    pub minor: f64,
    pub angle_deg: f64,
}

pub fn ellipse_axes(cov: &Matrix2<f64>) -> EllipseAxes {
    let sym = 0.5 * (cov + cov.transpose());
    let eig = SymmetricEigen::new(sym);
    let (i, j) = if eig.eigenvalues[0] >= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let v = eig.eigenvectors.column(i);
    let mut angle = v[1].atan2(v[0]).to_degrees();
    if angle <= -90.0 {
        angle += 180.0;
    } else if angle > 90.0 {
        angle -= 180.0;
    }
    EllipseAxes {
        major: eig.eigenvalues[i].max(0.0).sqrt(),
        minor: eig.eigenvalues[j].max(0.0).sqrt(),
        angle_deg: angle,
    }
}

pub fn encode_png(image: &ImagePlane) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = image
        .intensities
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = encoder.write_header().map_err(|e| Error::Io(e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::Io(e.to_string()))?;
    writer.finish().map_err(|e| Error::Io(e.to_string()))?;
    Ok(out)
}

/// The image with 1σ and 2σ ellipses, a cross at each mean and a square at
/// each visual point. Pixel centers sit at integer coordinates.
pub fn render_overlay(image: &ImagePlane, rows: &[ResultRow]) -> Result<String> {
    let png = base64::engine::general_purpose::STANDARD.encode(encode_png(image)?);
    let (w, h) = (image.width, image.height);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="-0.5 -0.5 {w} {h}">"#
    );
    let _ = writeln!(
        svg,
        r#"<image x="-0.5" y="-0.5" width="{w}" height="{h}" image-rendering="pixelated" href="data:image/png;base64,{png}"/>"#
    );
    for r in rows {
        let axes = ellipse_axes(&r.covariance());
        let (cx, cy) = (r.x_mean, r.y_mean);
        let _ = writeln!(
            svg,
            r#"<g class="track" data-frame="{}" data-track="{}">"#,
            r.frame, r.track
        );
        for (k, color) in [(1.0, "#ff3030"), (2.0, "#ffa020")] {
            let _ = writeln!(
                svg,
                r#"<ellipse cx="{cx:.4}" cy="{cy:.4}" rx="{:.4}" ry="{:.4}" transform="rotate({:.4} {cx:.4} {cy:.4})" fill="none" stroke="{color}" stroke-width="0.15"/>"#,
                k * axes.major,
                k * axes.minor,
                axes.angle_deg
            );
        }
        let s = 0.6;
        let _ = writeln!(
            svg,
            r##"<path d="M{:.4} {cy:.4}H{:.4}M{cx:.4} {:.4}V{:.4}" stroke="#30ff30" stroke-width="0.15"/>"##,
            cx - s,
            cx + s,
            cy - s,
            cy + s
        );
        if let Some(v) = r.visual {
            let _ = writeln!(
                svg,
                r##"<rect x="{:.4}" y="{:.4}" width="0.8" height="0.8" fill="none" stroke="#3080ff" stroke-width="0.15"/>"##,
                v.x - 0.4,
                v.y - 0.4
            );
        }
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pixel;

    fn row(cov: Matrix2<f64>) -> ResultRow {
        ResultRow {
            frame: 1,
            track: 7,
            x_mean: 5.0,
            y_mean: 6.0,
            sxx: cov[(0, 0)],
            sxy: cov[(0, 1)],
            syy: cov[(1, 1)],
            k_star: None,
            lambda: None,
            clipped: false,
            visual: Some(Pixel::new(5.5, 6.0)),
            mode: None,
        }
    }

    #[test]
    fn isotropic_is_a_circle() {
        let a = ellipse_axes(&(Matrix2::identity() * 4.0));
        assert!((a.major - 2.0).abs() < 1e-12 && (a.minor - 2.0).abs() < 1e-12);
    }

    #[test]
    fn anisotropic_axes_follow_eigenvectors() {
        // Eigenvalues 9 and 1 along (1, 1) and (1, -1).
        let cov = Matrix2::new(5.0, 4.0, 4.0, 5.0);
        let a = ellipse_axes(&cov);
        assert!((a.major - 3.0).abs() < 1e-12);
        assert!((a.minor - 1.0).abs() < 1e-12);
        assert!((a.angle_deg - 45.0).abs() < 1e-9, "{}", a.angle_deg);
        let flat = ellipse_axes(&Matrix2::new(1.0, 0.0, 0.0, 4.0));
        assert!((flat.angle_deg.abs() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn overlay_contents() {
        let img = ImagePlane::filled(8, 8, 0.5);
        let empty = render_overlay(&img, &[]).unwrap();
        assert!(empty.contains("<image") && !empty.contains("<ellipse"));
        let svg = render_overlay(&img, &[row(Matrix2::new(5.0, 4.0, 4.0, 5.0))]).unwrap();
        assert_eq!(svg.matches("<ellipse").count(), 2);
        assert!(svg.contains(r#"rx="3.0000" ry="1.0000" transform="rotate(45.0000"#));
        assert!(svg.contains(r#"rx="6.0000""#));
        assert!(svg.contains("<rect"));
        assert_eq!(
            svg,
            render_overlay(&img, &[row(Matrix2::new(5.0, 4.0, 4.0, 5.0))]).unwrap()
        );
    }

    #[test]
    fn png_decodes() {
        let img = ImagePlane::new(3, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let bytes = encode_png(&img).unwrap();
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[..info.buffer_size()], &[0, 51, 102, 153, 204, 255]);
    }
}
