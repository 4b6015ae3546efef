fn main() {
    println!("deblur-splat");
}
