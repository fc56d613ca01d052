//! Builds a reply tree, renders it as model context and reads depths.
//!
//! cargo run --example build_thread

use prism::conversation::{comment_depth, depth_bucket, serialize_context, Upto};
use prism::{build_thread, Comment, ImageRef, Post};

fn comment(id: &str, parent: &str, author: &str, text: &str, minute: u32) -> Comment {
    Comment {
        id: id.into(),
        parent_id: parent.into(),
        author: author.into(),
        text: text.into(),
        images: vec![],
        created_at: format!("2024-06-01T12:{minute:02}:00Z"),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let post = Post {
        id: "p1".into(),
        author: "maria".into(),
        text: "Costco just raised the membership fee.".into(),
        images: vec![ImageRef::new("img/receipt.png")],
        created_at: "2024-06-01T12:00:00Z".into(),
        target: "costco".into(),
    };
    // Input order does not matter; the tree is sorted parents first.
    let comments = vec![
        comment("c3", "c1", "maria", "Still cheaper than anywhere else.", 9),
        comment("c1", "p1", "dev", "Cancelling mine.", 2),
        comment("c2", "p1", "kim", "First hike in years, fair enough.", 4),
    ];
    let conv = build_thread(post, comments)?;

    println!("final comment: {:?}", conv.final_comment_id());
    println!("aliases: {:?}\n", conv.author_aliases());
    println!("{}\n", serialize_context(&conv, &Upto::All, None)?);

    for c in conv.comments() {
        let d = comment_depth(&conv, &c.id)?;
        println!("{} depth={} bucket={}", c.id, d, depth_bucket(d)?.label());
    }

    let earlier = conv.with_final("c1")?;
    println!("\nasking about c1 instead:\n{}", serialize_context(&earlier, &Upto::Before("c3".into()), None)?);
    Ok(())
}
