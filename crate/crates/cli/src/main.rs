fn main() {
    println!("lane3d");
}
